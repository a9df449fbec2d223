"""Dense-tensor layers and reverse-mode gradients for the field predictor.

Everything runs in float64 on (batch, channels, height, width) arrays so
finite-difference gradient checks hold to tight tolerances. Convolutions use
im2col gathers; transposed convolutions are implemented as the exact adjoint
of the matching convolution, which makes the inner-product adjoint identity
structural rather than numerical.
"""

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding windows of a padded input: (N, C, Ho, Wo, kh, kw)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(grad_cols: np.ndarray, shape, kh: int, kw: int, stride: int,
            padding: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add windows back onto the padded canvas."""
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = grad_cols.shape[2], grad_cols.shape[3]
    out = np.zeros((n, c, hp, wp))
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * ho:stride,
                kj:kj + stride * wo:stride] += grad_cols[:, :, :, :, ki, kj]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray,
                   stride: int, padding: int) -> np.ndarray:
    """Cross-correlation with bias; out = floor((in + 2p - k)/s) + 1."""
    if x.shape[1] != kernels.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels, kernels expect {kernels.shape[1]}")
    kh, kw = kernels.shape[2], kernels.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride)
    y = np.einsum("nchwkl,ockl->nohw", cols, kernels, optimize=True)
    return y + biases[None, :, None, None]


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, stride: int,
                    padding: int, grad_out: np.ndarray):
    """Gradients of conv2d_forward w.r.t. input, kernels and biases."""
    kh, kw = kernels.shape[2], kernels.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_k = np.einsum("nchwkl,nohw->ockl", cols, grad_out, optimize=True)
    grad_cols = np.einsum("nohw,ockl->nchwkl", grad_out, kernels, optimize=True)
    grad_x = _col2im(grad_cols, x.shape, kh, kw, stride, padding)
    return grad_x, grad_k, grad_b


def conv_transpose2d_forward(x: np.ndarray, kernels: np.ndarray,
                             biases: np.ndarray, stride: int,
                             padding: int) -> np.ndarray:
    """Adjoint of conv2d: out = (in - 1) * stride - 2p + k.

    kernels keep the conv layout (x_channels, out_channels, kh, kw): the
    layer scatters through the same tensor the matching conv would gather
    through.
    """
    if x.shape[1] != kernels.shape[0]:
        raise ValueError(
            f"input has {x.shape[1]} channels, kernels expect {kernels.shape[0]}")
    kh, kw = kernels.shape[2], kernels.shape[3]
    n = x.shape[0]
    h_out = (x.shape[2] - 1) * stride - 2 * padding + kh
    w_out = (x.shape[3] - 1) * stride - 2 * padding + kw
    grad_cols = np.einsum("nohw,ockl->nchwkl", x, kernels, optimize=True)
    y = _col2im(grad_cols, (n, kernels.shape[1], h_out, w_out),
                kh, kw, stride, padding)
    return y + biases[None, :, None, None]


def conv_transpose2d_backward(x: np.ndarray, kernels: np.ndarray, stride: int,
                              padding: int, grad_out: np.ndarray):
    """Gradients of the transposed convolution (the adjoint pair of conv2d)."""
    kh, kw = kernels.shape[2], kernels.shape[3]
    gp = np.pad(grad_out,
                ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(gp, kh, kw, stride)
    grad_x = np.einsum("nchwkl,ockl->nohw", cols, kernels, optimize=True)
    grad_k = np.einsum("nchwkl,nohw->ockl", cols, x, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_k, grad_b


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      mode: str, momentum: float = 0.9):
    """Per-channel normalization; train mode updates the running stats.

    Returns (y, cache, new_running_mean, new_running_var).
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch normalization needs batch >= 2 in train mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = momentum * running_mean + (1.0 - momentum) * mean
        new_rv = momentum * running_var + (1.0 - momentum) * var
    elif mode == "infer":
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, mode)
    return y, cache, new_rm, new_rv


def batchnorm_backward(cache, grad_out: np.ndarray):
    xhat, inv_std, gamma, mode = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma[None, :, None, None]
    if mode == "infer":
        grad_x = gxhat * inv_std[None, :, None, None]
    else:
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        grad_x = (inv_std[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
    return grad_x, grad_gamma, grad_beta


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, slope: float,
                        grad_out: np.ndarray) -> np.ndarray:
    return grad_out * np.where(x >= 0, 1.0, slope)


def dropout(x: np.ndarray, rate: float, rng, mode: str):
    """Inverted dropout; returns (y, mask). Identity in infer mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if mode == "infer" or rate == 0.0:
        return x, None
    mask = _as_rng(rng).random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(mask, rate: float, grad_out: np.ndarray) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask / (1.0 - rate)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. pred."""
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# model definition


@dataclass
class LayerParams:
    """One block: (transposed) convolution with optional BN and activation."""

    kind: str                      # "conv" | "conv_transpose"
    stride: int
    padding: int
    kernels: np.ndarray            # conv layout (out_ch, in_ch, kh, kw)
    biases: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    dropout_rate: float = 0.0
    activation_slope: float | None = None

    @property
    def has_norm(self) -> bool:
        return self.gamma is not None

    def out_channels(self) -> int:
        return self.kernels.shape[1] if self.kind == "conv_transpose" \
            else self.kernels.shape[0]


@dataclass
class ModelParams:
    """Encoder/decoder stack: N stride-2 conv blocks, N-1 transposed blocks,
    and a final transposed convolution back to one channel."""

    blocks: list[LayerParams]
    residual_channel: int
    n_encoder: int

    def __post_init__(self):
        if len(self.blocks) != 2 * self.n_encoder:
            raise ValueError("block count must equal 2N")

    def named_parameters(self):
        """Deterministic (name, array) iteration over trainable tensors."""
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.kernels", blk.kernels
            yield f"block{i}.biases", blk.biases
            if blk.has_norm:
                yield f"block{i}.gamma", blk.gamma
                yield f"block{i}.beta", blk.beta

    def named_buffers(self):
        for i, blk in enumerate(self.blocks):
            if blk.has_norm:
                yield f"block{i}.running_mean", blk.running_mean
                yield f"block{i}.running_var", blk.running_var

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        blk_name, _, attr = name.partition(".")
        blk = self.blocks[int(blk_name.removeprefix("block"))]
        setattr(blk, attr, value)


DEFAULT_ENCODER_WIDTHS = (16, 32, 64)
DEFAULT_DECODER_WIDTHS = (32, 16)
# Regularization noise caps how precisely the predictor can pin the converged
# fields, and prediction precision is what buys warm-start iterations, so the
# default keeps the dropout stage inactive (rate is configurable per model).
DEFAULT_DROPOUT = 0.0
DEFAULT_SLOPE = 0.01


def init_model(rng, in_channels: int = 7,
               encoder_widths=DEFAULT_ENCODER_WIDTHS,
               decoder_widths=DEFAULT_DECODER_WIDTHS,
               dropout_rate: float = DEFAULT_DROPOUT,
               slope: float = DEFAULT_SLOPE,
               residual_channel: int = 0) -> ModelParams:
    """He-initialized stack with stride-2 downsampling then upsampling."""
    rng = _as_rng(rng)
    n = len(encoder_widths)
    if len(decoder_widths) != n - 1:
        raise ValueError("need N-1 decoder widths for N encoder widths")

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    blocks = []
    c = in_channels
    for w in encoder_widths:
        blocks.append(LayerParams(
            kind="conv", stride=2, padding=1,
            kernels=he((w, c, 3, 3), c * 9), biases=np.zeros(w),
            gamma=np.ones(w), beta=np.zeros(w),
            running_mean=np.zeros(w), running_var=np.ones(w),
            dropout_rate=dropout_rate, activation_slope=slope))
        c = w
    for w in decoder_widths:
        blocks.append(LayerParams(
            kind="conv_transpose", stride=2, padding=1,
            kernels=he((c, w, 4, 4), c * 16), biases=np.zeros(w),
            gamma=np.ones(w), beta=np.zeros(w),
            running_mean=np.zeros(w), running_var=np.ones(w),
            dropout_rate=dropout_rate, activation_slope=slope))
        c = w
    blocks.append(LayerParams(
        kind="conv_transpose", stride=2, padding=1,
        kernels=he((c, 1, 4, 4), c * 16), biases=np.zeros(1)))
    return ModelParams(blocks=blocks, residual_channel=residual_channel, n_encoder=n)


def _layer_io(blk: LayerParams, x: np.ndarray) -> np.ndarray:
    if blk.kind == "conv":
        return conv2d_forward(x, blk.kernels, blk.biases, blk.stride, blk.padding)
    return conv_transpose2d_forward(x, blk.kernels, blk.biases, blk.stride, blk.padding)


def model_forward(model: ModelParams, x: np.ndarray, mode: str = "infer",
                  rng=0) -> np.ndarray:
    """Residual prediction: input channel plus the network correction.

    Infer mode evaluates samples one at a time so a sample's output is
    bitwise independent of whatever else shares the batch; batched float
    kernels do not guarantee that on their own.
    """
    if mode == "infer" and x.ndim == 4 and x.shape[0] > 1:
        return np.concatenate([
            _forward_with_cache(model, x[i:i + 1], mode, rng,
                                update_stats=False)[0]
            for i in range(x.shape[0])])
    y, _ = _forward_with_cache(model, x, mode, rng, update_stats=False)
    return y


def _check_input(model: ModelParams, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError("expected a (batch, channels, H, W) tensor")
    expected = model.blocks[0].kernels.shape[1]
    if x.shape[1] != expected:
        raise ValueError(f"expected {expected} input channels, got {x.shape[1]}")
    factor = 2 ** model.n_encoder
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ValueError(
            f"spatial dims must be multiples of {factor}, got {x.shape[2:]}")


def _forward_with_cache(model: ModelParams, x: np.ndarray, mode: str, rng,
                        update_stats: bool):
    _check_input(model, x)
    rng = _as_rng(rng)
    caches = []
    h = x
    for blk in model.blocks:
        pre = h
        z = _layer_io(blk, h)
        bn_cache = None
        if blk.has_norm:
            z_bn, bn_cache, new_rm, new_rv = batchnorm_forward(
                z, blk.gamma, blk.beta, blk.running_mean, blk.running_var, mode)
            if mode == "train" and update_stats:
                blk.running_mean, blk.running_var = new_rm, new_rv
        else:
            z_bn = z
        z_do, mask = dropout(z_bn, blk.dropout_rate, rng, mode) \
            if blk.dropout_rate else (z_bn, None)
        if blk.activation_slope is not None:
            out = leaky_relu(z_do, blk.activation_slope)
        else:
            out = z_do
        caches.append((pre, z, bn_cache, mask, z_do))
        h = out
    y = h + x[:, model.residual_channel:model.residual_channel + 1]
    return y, caches


def model_backward(model: ModelParams, x: np.ndarray, caches, grad_y: np.ndarray):
    """Gradients of the residual model output w.r.t. input and parameters."""
    grads = {}
    g = grad_y
    for i in range(len(model.blocks) - 1, -1, -1):
        blk = model.blocks[i]
        pre, z, bn_cache, mask, z_do = caches[i]
        if blk.activation_slope is not None:
            g = leaky_relu_backward(z_do, blk.activation_slope, g)
        if blk.dropout_rate:
            g = dropout_backward(mask, blk.dropout_rate, g)
        if blk.has_norm:
            g, g_gamma, g_beta = batchnorm_backward(bn_cache, g)
            grads[f"block{i}.gamma"] = g_gamma
            grads[f"block{i}.beta"] = g_beta
        if blk.kind == "conv":
            g, g_k, g_b = conv2d_backward(pre, blk.kernels, blk.stride,
                                          blk.padding, g)
        else:
            g, g_k, g_b = conv_transpose2d_backward(pre, blk.kernels, blk.stride,
                                                    blk.padding, g)
        grads[f"block{i}.kernels"] = g_k
        grads[f"block{i}.biases"] = g_b
    grad_x = g
    grad_x = grad_x.copy()
    grad_x[:, model.residual_channel] += grad_y[:, 0]
    return grad_x, grads


def model_train_step(model: ModelParams, x: np.ndarray, mode: str, rng):
    """Forward pass that records caches and updates BN running stats."""
    return _forward_with_cache(model, x, mode, rng, update_stats=True)


# ---------------------------------------------------------------------------
# weight container: text manifest + one little-endian float64 raw file

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "model.manifest"


def save_model(model: ModelParams, directory) -> None:
    """Bit-exact round-trippable dump of parameters and BN running stats."""
    import os

    os.makedirs(directory, exist_ok=True)
    tensors = list(model.named_parameters()) + list(model.named_buffers())
    lines = [
        f"residual_channel = {model.residual_channel}",
        f"n_encoder = {model.n_encoder}",
    ]
    for i, blk in enumerate(model.blocks):
        lines.append(
            f"block{i} = kind:{blk.kind} stride:{blk.stride} "
            f"padding:{blk.padding} dropout:{blk.dropout_rate!r} "
            f"slope:{blk.activation_slope!r} norm:{int(blk.has_norm)}")
    blob = bytearray()
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype="<f8")
        offset = len(blob)
        blob.extend(a.tobytes())
        shape = ",".join(str(d) for d in a.shape)
        lines.append(f"tensor {name} <f8 {shape} {offset} {a.nbytes}")
    with open(os.path.join(directory, WEIGHTS_FILE), "wb") as fh:
        fh.write(bytes(blob))
    with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(directory) -> ModelParams:
    import os

    with open(os.path.join(directory, MANIFEST_FILE), "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    with open(os.path.join(directory, WEIGHTS_FILE), "rb") as fh:
        blob = fh.read()

    meta = {}
    block_meta = {}
    tensors = {}
    for ln in lines:
        if ln.startswith("tensor "):
            _, name, dtype, shape_s, offset_s, nbytes_s = ln.split()
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            offset, nbytes = int(offset_s), int(nbytes_s)
            arr = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype).reshape(shape)
            tensors[name] = arr.copy()
        else:
            key, _, val = ln.partition(" = ")
            if key.startswith("block"):
                fields_ = dict(kv.split(":", 1) for kv in val.split())
                block_meta[int(key.removeprefix("block"))] = fields_
            else:
                meta[key] = val

    blocks = []
    for i in sorted(block_meta):
        bm = block_meta[i]
        has_norm = bool(int(bm["norm"]))
        slope = None if bm["slope"] == "None" else float(bm["slope"])
        blocks.append(LayerParams(
            kind=bm["kind"], stride=int(bm["stride"]), padding=int(bm["padding"]),
            kernels=tensors[f"block{i}.kernels"],
            biases=tensors[f"block{i}.biases"],
            gamma=tensors.get(f"block{i}.gamma") if has_norm else None,
            beta=tensors.get(f"block{i}.beta") if has_norm else None,
            running_mean=tensors.get(f"block{i}.running_mean") if has_norm else None,
            running_var=tensors.get(f"block{i}.running_var") if has_norm else None,
            dropout_rate=float(bm["dropout"]),
            activation_slope=slope))
    return ModelParams(blocks=blocks,
                       residual_channel=int(meta["residual_channel"]),
                       n_encoder=int(meta["n_encoder"]))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_model(cls, model: ModelParams) -> "AdamState":
        m = {name: np.zeros_like(p) for name, p in model.named_parameters()}
        v = {name: np.zeros_like(p) for name, p in model.named_parameters()}
        return cls(m=m, v=v)


def adam_step(model: ModelParams, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Standard Adam update with bias correction, applied in place."""
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for name, p in model.named_parameters():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        mhat = state.m[name] / b1t
        vhat = state.v[name] / b2t
        model.set_parameter(name, p - lr * mhat / (np.sqrt(vhat) + eps))
    return model, state
