"""zosim: deterministic forward-only fine-tuning runtimes at desk scale.

A small numpy library that trains a tiny decoder-only transformer with
central-difference zeroth-order updates under several runtimes (eager
in-memory, block-streaming over a simulated host/device hierarchy, and
three multi-worker strategies), plus discrete-event models of the
interconnect traffic they generate.  Everything is bit-reproducible; the
runtimes are provably equivalent and the test suite pins that.
"""

import os as _os

# Single-threaded BLAS by default: each simulated worker is one core, and
# deterministic GEMM partitioning keeps thread-parallel runs bit-stable.
# Export the variables before importing anything numpy-backed; set your own
# values in the environment to override.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .errors import (  # noqa: E402
    ConfigurationError,
    ConsistencyError,
    DimensionError,
    FabricFault,
    MemoryCapacityError,
    NumericError,
    ProtocolError,
    SimulationError,
    ZosimError,
)
from .model import (  # noqa: E402
    Batch,
    ModelConfig,
    ParamBlock,
    ParamStore,
    forward,
    forward_block,
    init_model,
    load_checkpoint,
    loss,
    make_batch,
    save_checkpoint,
)
from .rng import RngStateManager, iteration_seeds  # noqa: E402
from .zo import (  # noqa: E402
    StreamingZo,
    ZoHyper,
    ZoStep,
    dual_forward,
    flush_pending_update,
    mezo_step,
    perturb_block,
    perturb_params,
    update_block,
    update_params,
    zo_grad,
)

__version__ = "0.1.0"

__all__ = [
    "Batch", "ModelConfig", "ParamBlock", "ParamStore",
    "forward", "forward_block", "init_model", "loss", "make_batch",
    "save_checkpoint", "load_checkpoint",
    "RngStateManager", "iteration_seeds",
    "ZoHyper", "ZoStep", "StreamingZo",
    "zo_grad", "mezo_step", "dual_forward", "flush_pending_update",
    "perturb_block", "perturb_params", "update_block", "update_params",
    "ZosimError", "ConfigurationError", "DimensionError", "NumericError",
    "MemoryCapacityError", "FabricFault", "ConsistencyError", "ProtocolError",
    "SimulationError",
    "__version__",
]
