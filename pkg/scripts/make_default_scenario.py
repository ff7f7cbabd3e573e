"""Regenerate src/edgeplan/data/default_scenario.json.

Layer profiles are synthetic: equal per-layer compute and geometrically
shrinking intermediate features. Raw input sizes are the lossless payloads
of the three vision tasks; the decay ratio puts the size after layer 2 at the
co-inference payload of the same task.
"""

import json
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "edgeplan" / "data" / "default_scenario.json"


def manifest(mid, kind, total_flops, n_layers, input_bytes, feature_after_2, result_bytes, params):
    ratio = (feature_after_2 / input_bytes) ** 0.5
    layers = []
    for i in range(1, n_layers + 1):
        size = result_bytes if i == n_layers else max(result_bytes, round(input_bytes * ratio**i))
        layers.append({"flops": total_flops // n_layers, "out_feature_bytes": size})
    return {"id": mid, "task_kind": kind, "param_count": params, "input_bytes": input_bytes, "layers": layers}


def small(mid, kind, flops, input_bytes, result_bytes, params, n_layers=3):
    layers = [{"flops": flops // n_layers, "out_feature_bytes": max(result_bytes, input_bytes // 2 ** (i + 1))}
              for i in range(n_layers - 1)]
    layers.append({"flops": flops // n_layers, "out_feature_bytes": result_bytes})
    return {"id": mid, "task_kind": kind, "param_count": params, "input_bytes": input_bytes, "layers": layers}


scenario = {
    "id": "default",
    "models": [
        manifest("vit-b16", "image_classification", 18_700_000_000, 12, 224_410, 32_830, 1_000, 86_000_000),
        manifest("blip-caption", "image_captioning", 20_900_000_000, 12, 249_400, 18_770, 2_000, 224_000_000),
        manifest("blip-vqa", "vqa", 30_800_000_000, 12, 372_580, 20_390, 1_000, 361_000_000),
        manifest("openpose", "pose_detection", 16_000_000_000, 12, 224_410, 40_000, 6_000, 52_000_000),
        small("controlnet", "pose_to_image", 60_000_000_000, 6_000, 224_410, 361_000_000),
        small("mood-traffic-dt", "mood_from_traffic", 2_000_000, 40_000, 16, 5_000),
        small("mood-physio-rf", "mood_from_physio", 20_000_000, 96_000, 16, 50_000),
    ],
    "devices": [
        {"id": "jetson-nano", "tier": "client", "throughput": 2.2e10},
        {"id": "rtx-4090", "tier": "edge", "throughput": 4.0e13},
        {"id": "azure", "tier": "cloud", "throughput": 1.0e14},
    ],
    "links": {
        "client_edge_up": {"rate": "250 KB/s", "propagation_delay": 0.005},
        "client_edge_down": {"rate": "500 KB/s", "propagation_delay": 0.005},
        "edge_cloud_up": {"rate": "500 KB/s", "propagation_delay": 0.1},
        "edge_cloud_down": {"rate": "500 KB/s", "propagation_delay": 0.1},
    },
    "planner_prefix": {
        "sensors": ["camera", "wifi", "speaker"],
        "solvable_tasks": [
            "image_classification", "image_captioning", "vqa", "pose_detection",
            "pose_to_image", "mood_from_traffic", "mood_from_physio",
        ],
        "demonstrations": [
            {
                "request": "Replace the riding boy in my photo with a reading girl.",
                "plan": {"tasks": [{"task": "pose_detection"}, {"task": "pose_to_image"}], "combine": "sequence"},
            },
            {
                "request": "Monitor my emotions with the sensors at home.",
                "plan": {
                    "tasks": [
                        {"task": "mood_from_traffic", "input": "sensor:wifi"},
                        {"task": "mood_from_physio", "input": "sensor:speaker"},
                    ],
                    "combine": "fuse_outputs",
                },
            },
        ],
    },
    "settings": {
        "advisor_compute_s": 0.5,
        "request_bytes": 200,
        "reply_bytes": 500,
        "fusion_s": 0.1,
        "lossy_ratio": 6.6,
        "fl_uplink": "sequential",
    },
    "fl": {
        "n_clients": 10,
        "batch_size": 100,
        "local_epochs": 10,
        "global_rounds": 30,
        "lr": 0.05,
        "optimizer": {"name": "sgd"},
        "lr_schedule": {"name": "constant"},
        "augmentation": {"name": "none"},
        "model_arch": "mlp-32",
    },
    "fl_data": {
        "n_train": 2000, "n_test": 2000, "n_features": 8, "n_classes": 4,
        "clusters_per_class": 4, "cluster_std": 1.0, "separation": 2.0, "seed": 7,
    },
}

if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else OUT
    out.write_text(json.dumps(scenario, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")
