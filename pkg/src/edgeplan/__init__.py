"""edgeplan: a desk-scale simulator for cloud-edge-client AI orchestration.

Modules: ``registry`` (scenario files), ``planner`` and ``advisor`` (request
to task plan), ``offload`` (latency model and partition search), ``codec``
(task-oriented feature coding), ``fedsim`` (federated training and the
advisor-driven trial loop) and ``cli``.
"""

__version__ = "0.1.0"
