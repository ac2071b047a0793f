from .gradcheck import finite_difference_check
from .ops import (
    RunningStats,
    activation,
    affine_channel,
    batch_norm,
    bilinear_resize,
    conv2d,
    drop_path,
    gelu,
    interp_matrix,
    layer_norm,
    linear,
    matmul,
    mse,
    relu,
    softmax,
    transposed_conv2d,
    weighted_mse,
)
from .params import ParamStore
from .serialize import (
    FormatError,
    load_checkpoint,
    load_tensor,
    read_tensor,
    save_checkpoint,
    save_tensor,
    write_tensor,
)
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    no_grad,
    pad,
    roll,
    square,
    where_const,
)

__all__ = [name for name in dir() if not name.startswith("_")]
