"""Network architecture: ghost convolutions, spatial attention, squeeze gates.

The model is a chain of four downsampling blocks followed by a bounded spike
head and a linear classifier:

    block l:  ghost conv -> BN -> relu6 -> dropout -> spatial attention
              -> (alpha * x + P(block input)) -> 2x2 maxpool
    head:     separable conv -> BN -> per-channel affine -> clamp [0,1]
              -> squeeze-excite gate -> flatten -> dense logits

Structure (ModelSpec) is separate from parameters (a flat name->array dict),
so the converter can rewrite one without the other. Forward walks return
per-layer caches that the matching backward consumes; BatchNorm running-stat
updates are returned to the caller rather than applied in place.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError


# ====== configuration ======

@dataclass(frozen=True)
class GhostConfig:
    """One ghost convolution: a pointwise base branch plus cheap depthwise ghosts."""
    out_channels: int
    ratio: float = 0.5
    dw_kernel: int = 3
    mask_mode: str = "ones"

    def __post_init__(self):
        base = self.base_channels
        if base < 1 or base >= self.out_channels:
            raise ConfigError(
                f"ghost ratio {self.ratio} with {self.out_channels} channels leaves "
                f"base={base}; need 1 <= base <= out-1"
            )
        if self.mask_mode != "ones":
            raise ConfigError(f"unknown ghost mask mode {self.mask_mode!r}")

    @property
    def base_channels(self) -> int:
        return int(round(self.ratio * self.out_channels))

    @property
    def ghost_channels(self) -> int:
        return self.out_channels - self.base_channels

    @property
    def banks(self) -> int:
        """Number of multiplier-1 depthwise kernel banks needed for the ghosts."""
        return math.ceil(self.ghost_channels / self.base_channels)


@dataclass(frozen=True)
class QanaConfig:
    input_shape: tuple = (64, 64, 3)
    block_channels: tuple = (32, 64, 128, 256)
    head_channels: int = 256
    num_classes: int = 7
    ghost_ratio: float = 0.5
    ghost_kernel: int = 3
    eca_kernel: int = 3
    se_reduction: int = 16
    dropout_rate: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        h, w, c = self.input_shape
        div = 2 ** len(self.block_channels)
        if h % div or w % div:
            raise ConfigError(
                f"input spatial ({h},{w}) must be divisible by {div} "
                f"for {len(self.block_channels)} pooling stages"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.se_mid < 1:
            raise ConfigError(
                f"se_reduction {self.se_reduction} exceeds head width {self.head_channels}"
            )
        for ch in self.block_channels:
            GhostConfig(ch, self.ghost_ratio, self.ghost_kernel)

    @property
    def head_spatial(self) -> tuple:
        div = 2 ** len(self.block_channels)
        return self.input_shape[0] // div, self.input_shape[1] // div

    @property
    def flat_dim(self) -> int:
        hh, hw = self.head_spatial
        return hh * hw * self.head_channels

    @property
    def se_mid(self) -> int:
        return self.head_channels // self.se_reduction


@dataclass
class LayerSpec:
    kind: str
    name: str
    meta: dict = field(default_factory=dict)


@dataclass
class ModelSpec:
    config: QanaConfig
    layers: list

    def layer_names(self):
        return [l.name for l in self.layers]


# ====== construction ======

def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))).astype(dtype)


def build_qana(cfg: QanaConfig, rng, dtype=np.float32):
    """Create the layer chain and initialize parameters. Returns (ModelSpec, params)."""
    layers = []
    params = {}

    def add_bn(name, c):
        layers.append(LayerSpec("bn", name, {"channels": c}))
        params[f"{name}.gamma"] = np.ones(c, dtype)
        params[f"{name}.beta"] = np.zeros(c, dtype)
        params[f"{name}.running_mean"] = np.zeros(c, dtype)
        params[f"{name}.running_var"] = np.ones(c, dtype)

    prev_c = cfg.input_shape[2]
    for l, c_out in enumerate(cfg.block_channels, start=1):
        blk = f"block{l}"
        g = GhostConfig(c_out, cfg.ghost_ratio, cfg.ghost_kernel)
        layers.append(LayerSpec("ghost", f"{blk}.ghost", {
            "in_channels": prev_c, "out_channels": c_out,
            "base": g.base_channels, "ghost": g.ghost_channels,
            "banks": g.banks, "kernel": g.dw_kernel,
        }))
        params[f"{blk}.ghost.pw"] = _he(rng, (1, 1, prev_c, g.base_channels), prev_c, dtype)
        params[f"{blk}.ghost.dw"] = _he(
            rng, (g.dw_kernel, g.dw_kernel, g.base_channels, g.banks),
            g.dw_kernel * g.dw_kernel, dtype)
        params[f"{blk}.ghost.mask"] = np.ones(g.ghost_channels, dtype)
        add_bn(f"{blk}.bn", c_out)
        layers.append(LayerSpec("relu6", f"{blk}.relu6", {}))
        layers.append(LayerSpec("dropout", f"{blk}.dropout", {"rate": cfg.dropout_rate}))

        layers.append(LayerSpec("sa_eca", f"{blk}.eca", {
            "channels": c_out, "kernel": cfg.eca_kernel, "folded": False,
        }))
        k = cfg.eca_kernel
        params[f"{blk}.eca.dw"] = _he(rng, (k, k, c_out, 1), k * k, dtype)
        params[f"{blk}.eca.bn.gamma"] = np.ones(c_out, dtype)
        params[f"{blk}.eca.bn.beta"] = np.zeros(c_out, dtype)
        params[f"{blk}.eca.bn.running_mean"] = np.zeros(c_out, dtype)
        params[f"{blk}.eca.bn.running_var"] = np.ones(c_out, dtype)
        params[f"{blk}.eca.pw"] = _glorot(rng, (1, 1, c_out, c_out), c_out, c_out, dtype)
        params[f"{blk}.eca.pw_bias"] = np.zeros(c_out, dtype)

        has_proj = prev_c != c_out
        layers.append(LayerSpec("respool", f"{blk}.respool", {
            "in_channels": prev_c, "channels": c_out, "has_proj": has_proj,
        }))
        params[f"{blk}.respool.alpha"] = np.ones(c_out, dtype)
        if has_proj:
            params[f"{blk}.respool.proj"] = _glorot(
                rng, (1, 1, prev_c, c_out), prev_c, c_out, dtype)
        prev_c = c_out

    hc = cfg.head_channels
    layers.append(LayerSpec("sepconv", "head.sepconv", {
        "in_channels": prev_c, "out_channels": hc,
    }))
    params["head.sepconv.dw"] = _he(rng, (3, 3, prev_c, 1), 9, dtype)
    params["head.sepconv.pw"] = _he(rng, (1, 1, prev_c, hc), prev_c, dtype)
    add_bn("head.bn", hc)
    layers.append(LayerSpec("affine", "head.affine", {"channels": hc}))
    params["head.affine.gamma"] = np.ones(hc, dtype)
    params["head.affine.beta"] = np.zeros(hc, dtype)
    layers.append(LayerSpec("bounded_unit", "head.clamp", {}))

    layers.append(LayerSpec("se", "head.se", {"channels": hc, "mid": cfg.se_mid}))
    params["head.se.w1"] = _he(rng, (cfg.se_mid, hc), hc, dtype)
    params["head.se.b1"] = np.zeros(cfg.se_mid, dtype)
    params["head.se.w2"] = _glorot(rng, (hc, cfg.se_mid), cfg.se_mid, hc, dtype)
    params["head.se.b2"] = np.zeros(hc, dtype)

    layers.append(LayerSpec("flatten", "flatten", {}))
    layers.append(LayerSpec("dense", "classifier", {
        "in_dim": cfg.flat_dim, "out_dim": cfg.num_classes,
    }))
    params["classifier.w"] = _glorot(
        rng, (cfg.num_classes, cfg.flat_dim), cfg.flat_dim, cfg.num_classes, dtype)
    params["classifier.b"] = np.zeros(cfg.num_classes, dtype)

    return ModelSpec(cfg, layers), params


NON_TRAINABLE_SUFFIXES = (".running_mean", ".running_var", ".mask")


def is_trainable(name: str) -> bool:
    return not name.endswith(NON_TRAINABLE_SUFFIXES)


# ====== composite layer forwards ======
# Each _fwd_* returns (y, cache, updates) and each _bwd_* returns
# (dx, grads_dict, residual_grad_or_None).

def ghost_forward(x, pw, dw, mask, bias=None):
    """Ghost convolution: concat(pointwise base, masked depthwise ghosts).

    dw holds `banks` multiplier-1 depthwise kernel banks along its last axis;
    ghost channel g comes from base channel g % base through bank g // base.
    """
    y, _, _ = _ghost_core(x, pw, dw, mask, bias)
    return y


def _ghost_core(x, pw, dw, mask, bias):
    base_feat, pw_cache = ops.conv2d(x, pw, None, 1, "same")
    base = base_feat.shape[3]
    banks = dw.shape[3]
    ghost_n = mask.shape[0]
    bank_outs = []
    bank_caches = []
    for i in range(banks):
        out, cache = ops.depthwise_conv2d(base_feat, dw[:, :, :, i : i + 1], None, 1, "same")
        bank_outs.append(out)
        bank_caches.append(cache)
    stacked = np.concatenate(bank_outs, axis=3)[:, :, :, :ghost_n]
    ghost_feat = stacked * mask
    y = np.concatenate([base_feat, ghost_feat], axis=3)
    if bias is not None:
        y = y + bias
    cache = (pw_cache, bank_caches, stacked, mask, base, banks, ghost_n, bias is not None)
    return y, cache, {}


def _ghost_backward(dy, cache):
    pw_cache, bank_caches, stacked, mask, base, banks, ghost_n, has_bias = cache
    grads = {}
    if has_bias:
        grads["bias"] = dy.sum(axis=(0, 1, 2))
    d_base_direct = dy[:, :, :, :base]
    d_ghost = dy[:, :, :, base:] * mask
    d_base = d_base_direct.copy()
    ddw = []
    for i in range(banks):
        lo, hi = i * base, min((i + 1) * base, ghost_n)
        d_bank = np.zeros(d_base.shape, dtype=dy.dtype)
        if lo < hi:
            d_bank[:, :, :, : hi - lo] = d_ghost[:, :, :, lo:hi]
        dxi, dki, _ = ops.depthwise_conv2d_backward(d_bank, bank_caches[i])
        d_base += dxi
        ddw.append(dki)
    grads["dw"] = np.concatenate(ddw, axis=3)
    dx, dpw, _ = ops.conv2d_backward(d_base, pw_cache)
    grads["pw"] = dpw
    return dx, grads


def sa_eca_forward(x, dw, pw, pw_bias, bn=None, dw_bias=None, mode="infer",
                   momentum=0.9, eps=1e-5):
    """Spatial attention gate: sigmoid(pointwise(BN(depthwise(x)))) * x.

    bn is (gamma, beta, running_mean, running_var) pre-fold, or None once the
    BN has been folded into the depthwise kernel and dw_bias.
    """
    y, _, _ = _sa_eca_core(x, dw, pw, pw_bias, bn, dw_bias, mode, momentum, eps)
    return y


def _sa_eca_core(x, dw, pw, pw_bias, bn, dw_bias, mode, momentum, eps):
    t1, dw_cache = ops.depthwise_conv2d(x, dw, dw_bias, 1, "same")
    updates = {}
    if bn is not None:
        gamma, beta, rmean, rvar = bn
        t2, (nm, nv), bn_cache = ops.batch_norm(t1, gamma, beta, rmean, rvar,
                                                mode, momentum, eps)
        updates = {"bn.running_mean": nm, "bn.running_var": nv}
    else:
        t2, bn_cache = t1, None
    t3, pw_cache = ops.conv2d(t2, pw, pw_bias, 1, "same")
    g, sig_cache = ops.sigmoid(t3)
    y = g * x
    cache = (x, g, sig_cache, pw_cache, bn_cache, dw_cache, dw_bias is not None)
    return y, cache, updates


def _sa_eca_backward(dy, cache):
    x, g, sig_cache, pw_cache, bn_cache, dw_cache, has_dw_bias = cache
    grads = {}
    dg = dy * x
    dx = dy * g
    dt3 = ops.sigmoid_backward(dg, sig_cache)
    dt2, dpw, dpwb = ops.conv2d_backward(dt3, pw_cache)
    grads["pw"] = dpw
    grads["pw_bias"] = dpwb
    if bn_cache is not None:
        dt1, dgam, dbeta = ops.batch_norm_backward(dt2, bn_cache)
        grads["bn.gamma"] = dgam
        grads["bn.beta"] = dbeta
    else:
        dt1 = dt2
    dx1, ddw, ddwb = ops.depthwise_conv2d_backward(dt1, dw_cache)
    grads["dw"] = ddw
    if has_dw_bias:
        grads["dw_bias"] = ddwb
    dx = dx + dx1
    return dx, grads


def se_forward(x, w1, b1, w2, b2):
    """Squeeze-excite: per-channel sigmoid gains from the spatial mean."""
    y, _, _ = _se_core(x, w1, b1, w2, b2)
    return y


def _se_core(x, w1, b1, w2, b2):
    m, m_shape = ops.spatial_mean(x)
    h1, d1_cache = ops.dense(m, w1, b1)
    h1r, relu_cache = ops.relu(h1)
    h2, d2_cache = ops.dense(h1r, w2, b2)
    s, sig_cache = ops.sigmoid(h2)
    y = x * s[:, None, None, :]
    cache = (x, s, sig_cache, d2_cache, relu_cache, d1_cache, m_shape)
    return y, cache, {}


def _se_backward(dy, cache):
    x, s, sig_cache, d2_cache, relu_cache, d1_cache, m_shape = cache
    ds = (dy * x).sum(axis=(1, 2))
    dx = dy * s[:, None, None, :]
    dh2 = ops.sigmoid_backward(ds, sig_cache)
    dh1r, dw2, db2 = ops.dense_backward(dh2, d2_cache)
    dh1 = ops.relu_backward(dh1r, relu_cache)
    dm, dw1, db1 = ops.dense_backward(dh1, d1_cache)
    dx = dx + ops.spatial_mean_backward(dm, m_shape)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def spike_head_forward(x, dw, pw, bn, affine, bias=None, mode="infer",
                       momentum=0.9, eps=1e-5):
    """Separable conv -> BN -> per-channel affine -> clamp to [0,1].

    Outputs are guaranteed to lie in [0,1] whatever the inputs or parameters.
    bn is (gamma, beta, running_mean, running_var) or None post-fold; affine is
    (gamma, beta) or None post-fold.
    """
    t, _ = ops.separable_conv2d(x, dw, pw, bias, 1, "same")
    if bn is not None:
        gamma, beta, rmean, rvar = bn
        t, _, _ = ops.batch_norm(t, gamma, beta, rmean, rvar, mode, momentum, eps)
    if affine is not None:
        t = affine[0] * t + affine[1]
    y, _ = ops.bounded_unit(t)
    return y


def classify(x, w, b):
    """Flatten then dense logits."""
    flat, _ = ops.flatten(x)
    y, _ = ops.dense(flat, w, b)
    return y


# ====== whole-model walk ======

def model_forward(model: ModelSpec, params: dict, x, mode="infer", rng=None,
                  capture=None, want_caches=False):
    """Run the chain. Returns (logits, caches, updates).

    capture: optional dict filled with {layer_name: output} for every layer.
    updates: {param_name: new_value} for BatchNorm running stats (train mode).
    """
    cfg = model.config
    if x.ndim != 4 or x.shape[1:] != tuple(cfg.input_shape):
        raise ShapeError(
            f"model_forward expects input [N,{cfg.input_shape[0]},{cfg.input_shape[1]},"
            f"{cfg.input_shape[2]}], got {x.shape}"
        )
    caches = []
    updates = {}
    block_inputs = []
    for layer in model.layers:
        kind, name = layer.kind, layer.name
        p = lambda slot: params[f"{name}.{slot}"]
        opt = lambda slot: params.get(f"{name}.{slot}")

        if kind == "ghost":
            block_inputs.append(x)
            y, cache, _ = _ghost_core(x, p("pw"), p("dw"), p("mask"), opt("bias"))
        elif kind == "bn":
            y, (nm, nv), cache = ops.batch_norm(
                x, p("gamma"), p("beta"), p("running_mean"), p("running_var"),
                mode, cfg.bn_momentum, cfg.bn_eps)
            if mode == "train":
                updates[f"{name}.running_mean"] = nm
                updates[f"{name}.running_var"] = nv
        elif kind == "relu6":
            y, cache = ops.relu6(x)
        elif kind == "dropout":
            y, cache = ops.dropout(x, layer.meta["rate"], mode, rng)
        elif kind == "sa_eca":
            bn = None
            if not layer.meta.get("folded", False):
                bn = (p("bn.gamma"), p("bn.beta"),
                      p("bn.running_mean"), p("bn.running_var"))
            y, cache, upd = _sa_eca_core(x, p("dw"), p("pw"), p("pw_bias"), bn,
                                         opt("dw_bias"), mode, cfg.bn_momentum, cfg.bn_eps)
            if mode == "train":
                for k, v in upd.items():
                    updates[f"{name}.{k}"] = v
        elif kind == "respool":
            block_in = block_inputs.pop()
            a = p("alpha") * x
            if layer.meta["has_proj"]:
                proj_out, proj_cache = ops.conv2d(block_in, p("proj"), None, 1, "same")
            else:
                proj_out, proj_cache = block_in, None
            s = a + proj_out
            y, pool_cache = ops.maxpool2d(s)
            cache = (x, p("alpha"), proj_cache, pool_cache)
        elif kind == "sepconv":
            y, cache = ops.separable_conv2d(x, p("dw"), p("pw"), opt("bias"), 1, "same")
        elif kind == "affine":
            y = p("gamma") * x + p("beta")
            cache = x
        elif kind == "bounded_unit":
            y, cache = ops.bounded_unit(x)
        elif kind == "se":
            y, cache, _ = _se_core(x, p("w1"), p("b1"), p("w2"), p("b2"))
        elif kind == "flatten":
            y, cache = ops.flatten(x)
        elif kind == "dense":
            y, cache = ops.dense(x, p("w"), p("b"))
        else:
            raise ShapeError(f"unknown layer kind {kind!r} at {name}")

        if capture is not None:
            capture[name] = y
        caches.append(cache)
        x = y
    return x, (caches if want_caches else None), updates


def model_backward(model: ModelSpec, params: dict, caches: list, dlogits):
    """Gradients of a scalar loss with upstream dlogits. Returns {param: grad}."""
    grads = {}
    pending_residual = []
    dx = dlogits
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        kind, name = layer.kind, layer.name
        if kind == "ghost":
            dx, g = _ghost_backward(dx, cache)
            for k, v in g.items():
                grads[f"{name}.{k}"] = v
            dx = dx + pending_residual.pop()
        elif kind == "bn":
            dx, dgam, dbeta = ops.batch_norm_backward(dx, cache)
            grads[f"{name}.gamma"] = dgam
            grads[f"{name}.beta"] = dbeta
        elif kind == "relu6":
            dx = ops.relu6_backward(dx, cache)
        elif kind == "dropout":
            dx = ops.dropout_backward(dx, cache)
        elif kind == "sa_eca":
            dx, g = _sa_eca_backward(dx, cache)
            for k, v in g.items():
                grads[f"{name}.{k}"] = v
        elif kind == "respool":
            x_in, alpha, proj_cache, pool_cache = cache
            ds = ops.maxpool2d_backward(dx, pool_cache)
            grads[f"{name}.alpha"] = (ds * x_in).sum(axis=(0, 1, 2))
            dx = ds * alpha
            if proj_cache is not None:
                dres, dproj, _ = ops.conv2d_backward(ds, proj_cache)
                grads[f"{name}.proj"] = dproj
            else:
                dres = ds
            pending_residual.append(dres)
        elif kind == "sepconv":
            dx, ddw, dpw, db = ops.separable_conv2d_backward(dx, cache)
            grads[f"{name}.dw"] = ddw
            grads[f"{name}.pw"] = dpw
            if db is not None:
                grads[f"{name}.bias"] = db
        elif kind == "affine":
            x_in = cache
            grads[f"{name}.gamma"] = (dx * x_in).sum(axis=(0, 1, 2))
            grads[f"{name}.beta"] = dx.sum(axis=(0, 1, 2))
            dx = dx * params[f"{name}.gamma"]
        elif kind == "bounded_unit":
            dx = ops.bounded_unit_backward(dx, cache)
        elif kind == "se":
            dx, g = _se_backward(dx, cache)
            for k, v in g.items():
                grads[f"{name}.{k}"] = v
        elif kind == "flatten":
            dx = ops.flatten_backward(dx, cache)
        elif kind == "dense":
            dx, dw, db = ops.dense_backward(dx, cache)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
        else:  # pragma: no cover - forward already rejects
            raise ShapeError(f"unknown layer kind {kind!r}")
    return grads


def qana_block_forward(x, block_params, mode="infer", rng=None, rate=0.2,
                       momentum=0.9, eps=1e-5):
    """One full block from explicit arrays (test-friendly composition).

    block_params: dict with keys pw, dw, mask, bn (4-tuple), eca_dw,
    eca_bn (4-tuple), eca_pw, eca_pw_bias, alpha, proj (or None).
    """
    bp = block_params
    g = ghost_forward(x, bp["pw"], bp["dw"], bp["mask"])
    gamma, beta, rm, rv = bp["bn"]
    t, _, _ = ops.batch_norm(g, gamma, beta, rm, rv, mode, momentum, eps)
    t, _ = ops.relu6(t)
    t, _ = ops.dropout(t, rate, mode, rng)
    t = sa_eca_forward(t, bp["eca_dw"], bp["eca_pw"], bp["eca_pw_bias"],
                       bn=bp["eca_bn"], mode=mode, momentum=momentum, eps=eps)
    a = bp["alpha"] * t
    res = x if bp["proj"] is None else ops.conv2d(x, bp["proj"], None, 1, "same")[0]
    y, _ = ops.maxpool2d(a + res)
    return y
