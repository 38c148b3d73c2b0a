from .gradcheck import GradCheckResult, grad_check
from .optim import AdamConfig, AdamState, adam_step
from .rng import RngHub, stream
from .serialize import (
    BLOB_NAME,
    MAGIC,
    MANIFEST_NAME,
    SerializationError,
    load_bundle,
    save_bundle,
    tensor_from_bytes,
    tensor_to_bytes,
)
from .tensor import (
    DomainError,
    Graph,
    NumericalError,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    default_dtype,
    exp,
    gather_rows,
    kl_divergence,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    nan_checks,
    neg,
    relu,
    reshape,
    scale,
    select_last,
    set_default_dtype,
    set_nan_checks,
    shift,
    sigmoid,
    slice_,
    softmax,
    softplus,
    sub,
    sum_,
    swap_last2,
    tensor,
    transpose,
    use_dtype,
)

__all__ = [name for name in dir() if not name.startswith("_")]
