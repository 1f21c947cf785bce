"""Byzantine-robust federated learning with Shapley-value client selection.

Modules map onto the pieces of the simulator:

- ``model_core``   param vectors, numpy classifiers, SGD, evaluation
- ``data``         datasets, IDX reader, synthetic blobs, non-IID partition
- ``shapley``      coalition games and Shapley estimators
- ``attacks``      malicious client behaviours
- ``aggregation``  FedAvg and robust aggregators
- ``selection``    SV smoothing and two-cluster client selection
- ``orchestrator`` round loop, sweeps, detection report
- ``config``/``cli`` file schema and command line
"""
from .orchestrator import RunConfig, RunSummary, desk_scale_config, run, run_sweep

__all__ = ["RunConfig", "RunSummary", "desk_scale_config", "run", "run_sweep"]
__version__ = "0.1.0"
