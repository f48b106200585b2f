"""HAFFormer: hierarchical attention-free transformer for long-sequence classification."""

import os as _os

# Cap numeric-library threading before numpy first loads; single-threaded
# BLAS keeps results bit-reproducible across processes. HAFF_THREADS
# raises the cap. Has no effect if numpy was already imported.
_threads = _os.environ.get("HAFF_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from . import analysis, data, mixers, model, tensor, training  # noqa: E402
from .analysis import CostReport, count_costs, count_macs, count_params, emit_cost_table  # noqa: E402
from .data import Dataset, EmbeddingRecord, load_embedding, pad_or_truncate, save_embedding, synthesize_dataset  # noqa: E402
from .mixers import BlockParams, ChannelMixerKind, TokenMixerKind, afformer_block, channel_mix, token_mix  # noqa: E402
from .model import (  # noqa: E402
    HierarchyPreset,
    Model,
    ModelConfig,
    ParameterStore,
    apply_preset,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor, grad_check  # noqa: E402
from .training import Metrics, OptimizerState, adamw_step, cross_entropy, evaluate, train  # noqa: E402

__version__ = "0.1.0"
