"""Turn a trained model into an integer spiking network.

The pipeline is fold -> calibrate -> map:

* fold_batchnorm rewrites the chain so every normalization (block BN, the
  gate-internal BN, the head affine) is absorbed into the adjacent conv as a
  kernel scale plus a bias, and dropout disappears. The folded model computes
  the same inference function.
* calibrate runs the folded model over a sample set and records per-stream
  activation ranges (high-percentile) plus the logit shift that makes every
  class output non-negative.
* map_operators emits one spiking node per stage. Counts approximate values
  through v ~ count * r / T, so for a node with inputs j the charge unit is
  u = max_j(max|W_j| * r_j) / 127, weights become int8 charges
  round(W * r_j / u), biases become per-step charges round(b / u), and the
  firing threshold is round(r_out / u). Ghost and separable convolutions are
  first composed into single dense kernels (exact, because both feed their
  normalization bias-free).

Rates cannot carry signed values, but residual merges swing negative.
Calibration therefore records a per-stream shift (the low percentile of the
observed merge outputs); the merge node injects that shift as per-step bias
charge so its rate codes v + off, and each consumer cancels the shift
through its own bias. With 'same' padding the border taps see fewer inputs,
so the cancellation for convolutions is a per-position bias map computed by
running the quantized kernel over a constant image once at mapping time.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .arch import LayerSpec, ModelSpec, model_forward
from .errors import ConversionError
from .quant import (QuantParams, activation_quant_params, dequantize,
                    percentile_high, quantize_tensor, round_half_away)
from .runtime import _node_out_elems, simulate_many
from .snn import SnnNode, SpikingNetworkSpec
from .train import forward_logits

_INT32_MAX = 2**31 - 1


# ====== batch-norm folding ======

def _bn_scale_shift(params, prefix, eps):
    gamma = params[f"{prefix}.gamma"].astype(np.float64)
    beta = params[f"{prefix}.beta"].astype(np.float64)
    mean = params[f"{prefix}.running_mean"].astype(np.float64)
    var = params[f"{prefix}.running_var"].astype(np.float64)
    s = gamma / np.sqrt(var + eps)
    return s, beta - s * mean


def _copy_params(src, dst, name):
    for key, value in src.items():
        if key.startswith(name + "."):
            dst[key] = value.copy()


def fold_batchnorm(model: ModelSpec, params: dict):
    """Absorb BN and affine stages into their convs. Returns (model', params').

    The folded chain has no bn, dropout, or affine layers; ghost and sepconv
    layers gain a `.bias` parameter, gate layers gain `.dw_bias`. Inputs are
    not modified.
    """
    eps = model.config.bn_eps
    layers_out = []
    out = {}
    src = model.layers
    i = 0
    while i < len(src):
        layer = src[i]
        kind, name = layer.kind, layer.name

        if kind == "ghost":
            if i + 1 >= len(src) or src[i + 1].kind != "bn":
                raise ConversionError(f"{name}: ghost conv is not followed by a "
                                      "BN layer to fold")
            s, shift = _bn_scale_shift(params, src[i + 1].name, eps)
            dt = params[f"{name}.pw"].dtype
            pw = params[f"{name}.pw"].astype(np.float64)
            dw = params[f"{name}.dw"].astype(np.float64).copy()
            base, ghost = layer.meta["base"], layer.meta["ghost"]
            if np.abs(s[:base]).min() < 1e-30:
                raise ConversionError(f"{name}: BN scale for a shared base "
                                      "channel is zero, cannot fold")
            pw = pw * s[:base]
            # ghost channels are convolved from the (now rescaled) base maps,
            # so their own scale must divide out the source channel's factor
            for g in range(ghost):
                dw[:, :, g % base, g // base] *= s[base + g] / s[g % base]
            out[f"{name}.pw"] = pw.astype(dt)
            out[f"{name}.dw"] = dw.astype(dt)
            out[f"{name}.mask"] = params[f"{name}.mask"].copy()
            out[f"{name}.bias"] = shift.astype(dt)
            layers_out.append(LayerSpec("ghost", name, dict(layer.meta)))
            i += 2
            continue

        if kind == "sepconv":
            if i + 1 >= len(src) or src[i + 1].kind != "bn":
                raise ConversionError(f"{name}: separable conv is not followed "
                                      "by a BN layer to fold")
            s, shift = _bn_scale_shift(params, src[i + 1].name, eps)
            dt = params[f"{name}.pw"].dtype
            pw = params[f"{name}.pw"].astype(np.float64) * s
            bias = shift
            skip = 2
            if i + 2 < len(src) and src[i + 2].kind == "affine":
                aff = src[i + 2].name
                gamma = params[f"{aff}.gamma"].astype(np.float64)
                beta = params[f"{aff}.beta"].astype(np.float64)
                pw = pw * gamma
                bias = gamma * bias + beta
                skip = 3
            out[f"{name}.dw"] = params[f"{name}.dw"].copy()
            out[f"{name}.pw"] = pw.astype(dt)
            out[f"{name}.bias"] = bias.astype(dt)
            layers_out.append(LayerSpec("sepconv", name, dict(layer.meta)))
            i += skip
            continue

        if kind == "sa_eca":
            s, shift = _bn_scale_shift(params, f"{name}.bn", eps)
            dt = params[f"{name}.dw"].dtype
            dw = params[f"{name}.dw"].astype(np.float64).copy()
            dw[:, :, :, 0] *= s
            out[f"{name}.dw"] = dw.astype(dt)
            out[f"{name}.dw_bias"] = shift.astype(dt)
            out[f"{name}.pw"] = params[f"{name}.pw"].copy()
            out[f"{name}.pw_bias"] = params[f"{name}.pw_bias"].copy()
            meta = dict(layer.meta)
            meta["folded"] = True
            layers_out.append(LayerSpec("sa_eca", name, meta))
            i += 1
            continue

        if kind == "dropout":
            i += 1
            continue
        if kind == "bn":
            raise ConversionError(f"{name}: BN layer is not attached to a "
                                  "foldable conv")
        if kind == "affine":
            raise ConversionError(f"{name}: affine layer is not attached to a "
                                  "foldable conv")

        _copy_params(params, out, name)
        layers_out.append(LayerSpec(kind, name, dict(layer.meta)))
        i += 1

    return ModelSpec(model.config, layers_out), out


def _require_folded(model):
    for layer in model.layers:
        if layer.kind in ("bn", "dropout", "affine"):
            raise ConversionError(f"{layer.name}: fold normalization before "
                                  "conversion")
        if layer.kind == "sa_eca" and not layer.meta.get("folded", False):
            raise ConversionError(f"{layer.name}: gate BN is not folded")


# ====== composition rewrites ======

def compose_ghost_kernel(pw, dw, mask, k=None):
    """Collapse a ghost module into one dense [k,k,cin,cout] kernel.

    Exact: the pointwise base has no bias, so zero padding commutes with the
    composition and borders match the two-stage form bit for bit (up to float
    association).
    """
    pw = np.asarray(pw, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if k is None:
        k = dw.shape[0]
    cin, base = pw.shape[2], pw.shape[3]
    ghost = mask.shape[0]
    kernel = np.zeros((k, k, cin, base + ghost))
    kernel[k // 2, k // 2, :, :base] = pw[0, 0]
    for g in range(ghost):
        src, bank = g % base, g // base
        kernel[:, :, :, base + g] = (
            dw[:, :, src, bank][:, :, None] * pw[0, 0, :, src][None, None, :] * mask[g])
    return kernel


def compose_separable_kernel(dw, pw):
    """Collapse depthwise 3x3 + pointwise into one [3,3,cin,cout] kernel."""
    dw = np.asarray(dw, dtype=np.float64)
    pw = np.asarray(pw, dtype=np.float64)
    return dw[:, :, :, 0][:, :, :, None] * pw[0, 0][None, None, :, :]


# ====== calibration ======

# layers whose outputs define count-stream scales
_RANGE_LAYERS = ("relu6", "respool", "bounded_unit")
_RATE_LAYERS = _RANGE_LAYERS + ("sa_eca", "se", "dense")


@dataclass
class CalibrationResult:
    ranges: dict          # layer name -> QuantParams for that stream
    mean_rates: dict      # layer name -> mean activation / range, in [0, 1]
    logit_offset: float   # added to classifier biases so outputs stay >= 0
    logit_lo: float
    logit_hi: float
    n_samples: int
    percentile: float
    offsets: dict         # residual stream name -> shift making it non-negative


def calibrate(model: ModelSpec, params: dict, pixels, q=99.9, batch_size=32):
    """Observe activation ranges of the folded model on a calibration set."""
    _require_folded(model)
    pixels = np.asarray(pixels)
    if pixels.ndim != 4 or pixels.shape[0] == 0:
        raise ConversionError(f"calibration set must be a non-empty [N,H,W,C] "
                              f"batch, got shape {pixels.shape}")
    watch = {l.name: l.kind for l in model.layers if l.kind in _RATE_LAYERS}
    pools = {name: [] for name in watch}
    for lo in range(0, pixels.shape[0], batch_size):
        cap = {}
        model_forward(model, params, pixels[lo : lo + batch_size],
                      mode="infer", capture=cap)
        for name in watch:
            pools[name].append(np.asarray(cap[name], dtype=np.float32).ravel())
    values = {name: np.concatenate(chunks) for name, chunks in pools.items()}

    logit_name = model.layers[-1].name
    logits = values.pop(logit_name).astype(np.float64)
    lo, hi = float(logits.min()), float(logits.max())
    margin = 0.05 * (hi - lo) + 1e-6
    offset = max(0.0, margin - lo)
    # the top logit decides the class, so its stream range uses the observed
    # max with headroom instead of a clipped percentile
    logit_range = (hi + offset) * 1.05

    ranges = {}
    mean_rates = {}
    offsets = {}
    for name, vals in values.items():
        if watch[name] == "respool":
            # residual merges swing negative; shift the stream so rates can
            # carry it, consumers subtract the shift back out
            floor_lo = -percentile_high(-vals, q)
            off = max(0.0, -floor_lo)
            offsets[name] = off
            r = max(percentile_high(vals, q) + off, 1e-12)
            ranges[name] = QuantParams(scale=r / 255.0, zero_point=0,
                                       signed=False)
            mean_rates[name] = float(np.clip(vals + off, 0, None).mean() / r)
            continue
        if watch[name] in _RANGE_LAYERS:
            ranges[name] = activation_quant_params(vals, q)
            r = ranges[name].scale * 255.0
        else:
            r = max(percentile_high(vals, q), 1e-12)
        mean_rates[name] = float(np.clip(vals, 0, None).mean() / r)
    ranges[logit_name] = QuantParams(scale=logit_range / 255.0, zero_point=0,
                                     signed=False)
    mean_rates[logit_name] = float((logits + offset).mean() / logit_range)
    return CalibrationResult(ranges, mean_rates, offset, lo, hi,
                             int(pixels.shape[0]), q, offsets)


# ====== operator mapping ======

@dataclass
class _Stream:
    node: int
    r: float
    name: str
    off: float = 0.0


def _charge_quant(weight_terms, r_out, where):
    """Shared charge unit for a node: u = max_j(max|W_j| * r_j) / 127."""
    peak = max(float(np.max(np.abs(w))) * r for w, r in weight_terms)
    if peak == 0.0:
        raise ConversionError(f"{where}: all-zero weights cannot be mapped to "
                              "charges")
    u = peak / 127.0
    theta = max(1, int(round_half_away(r_out / u)))
    if theta > _INT32_MAX:
        raise ConversionError(f"{where}: firing threshold {theta} exceeds int32")
    qs = [np.clip(round_half_away(w * (r / u)), -127, 127).astype(np.int8)
          for w, r in weight_terms]
    return u, theta, qs


def _charge_array(charges, where):
    b = round_half_away(np.asarray(charges, dtype=np.float64))
    if np.abs(b).max(initial=0) > _INT32_MAX:
        raise ConversionError(f"{where}: bias charge exceeds int32")
    return b.astype(np.int32)


def _bias_charges(bias, u, where):
    return _charge_array(np.asarray(bias, dtype=np.float64) / u, where)


def _offset_spill(kernel_q, h, w):
    """Per-position charge a constant input of 1.0 would inject through a
    quantized kernel ('same' padding makes the border rows differ)."""
    ones = np.ones((1, h, w, kernel_q.shape[2]))
    spill, _ = ops.conv2d(ones, kernel_q.astype(np.float64), padding="same")
    return spill[0]


def _cap_counts(ceiling, qp: QuantParams):
    # cap = round(ceiling / s) in the 255-step count scale of the stream
    return max(1, int(round_half_away(ceiling / qp.scale)))


def _range_of(calib, layer_name):
    try:
        qp = calib.ranges[layer_name]
    except KeyError:
        raise ConversionError(f"no calibrated range for stream {layer_name!r}")
    return qp, qp.scale * 255.0


def map_operators(model: ModelSpec, params: dict, calib: CalibrationResult):
    """Build the spiking graph from a folded model and its calibration."""
    _require_folded(model)
    cfg = model.config
    nodes = []
    mapping = {}
    block_stack = []
    stream = _Stream(-1, 1.0, "input")
    h, w = cfg.input_shape[0], cfg.input_shape[1]
    layers = model.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        kind, name = layer.kind, layer.name

        if kind == "ghost":
            block_stack.append(stream)
            if i + 1 >= len(layers) or layers[i + 1].kind != "relu6":
                raise ConversionError(f"{name}: ghost conv must feed a relu6 "
                                      "stage to become a capped IF node")
            cap_name = layers[i + 1].name
            kernel = compose_ghost_kernel(params[f"{name}.pw"],
                                          params[f"{name}.dw"],
                                          params[f"{name}.mask"],
                                          layer.meta["kernel"])
            qp, r_out = _range_of(calib, cap_name)
            u, theta, (qk,) = _charge_quant([(kernel, stream.r)], r_out, name)
            cout = kernel.shape[3]
            bias = params[f"{name}.bias"].astype(np.float64)
            if stream.off:
                spill = _offset_spill(qk, h, w)
                charges = bias / u - (stream.off / stream.r) * spill
                qb = _charge_array(charges, name)
            else:
                qb = _bias_charges(bias, u, name)
            node = SnnNode("conv_if", name, [stream.node],
                           arrays={"kernel": qk,
                                   "bias": qb,
                                   "theta": np.full(cout, theta, dtype=np.int32)},
                           ints={"cap": _cap_counts(6.0, qp)},
                           scalars={"u": u, "r_in": stream.r, "r_out": r_out})
            nodes.append(node)
            nid = len(nodes) - 1
            mapping[name] = (nid, "body")
            mapping[cap_name] = (nid, "cap")
            stream = _Stream(nid, r_out, cap_name)
            i += 2
            continue

        if kind == "sa_eca":
            if stream.off:
                raise ConversionError(f"{name}: gain node cannot thin an "
                                      "offset-coded stream")
            node = SnnNode("gain_eca", name, [stream.node],
                           arrays={"dw": params[f"{name}.dw"].astype(np.float64),
                                   "dw_bias": params[f"{name}.dw_bias"].astype(np.float64),
                                   "pw": params[f"{name}.pw"].astype(np.float64),
                                   "pw_bias": params[f"{name}.pw_bias"].astype(np.float64)},
                           scalars={"r_in": stream.r})
            nodes.append(node)
            nid = len(nodes) - 1
            mapping[name] = (nid, "body")
            stream = _Stream(nid, stream.r, name)
            i += 1
            continue

        if kind == "respool":
            gated = stream
            block_in = block_stack.pop()
            alpha = params[f"{name}.alpha"].astype(np.float64)
            channels = alpha.shape[0]
            if layer.meta["has_proj"]:
                proj = params[f"{name}.proj"].astype(np.float64)
            else:
                proj = np.eye(channels)[None, None]
            qp, r_out = _range_of(calib, name)
            off_out = calib.offsets.get(name, 0.0)
            u, theta, (qa, qp_proj) = _charge_quant(
                [(alpha, gated.r), (proj, block_in.r)], r_out, name)
            arrays = {"alpha": qa,
                      "proj": qp_proj,
                      "theta": np.full(channels, theta, dtype=np.int32)}
            charges = np.full((h, w, channels), off_out / u)
            if block_in.off:
                spill = _offset_spill(qp_proj, h, w)
                charges -= (block_in.off / block_in.r) * spill
            qb = _charge_array(charges, name)
            if np.any(qb):
                arrays["bias"] = qb
            node = SnnNode("add_pool_if", name, [gated.node, block_in.node],
                           arrays=arrays,
                           scalars={"u": u, "r_a": gated.r, "r_b": block_in.r,
                                    "r_out": r_out, "off_out": off_out})
            nodes.append(node)
            nid = len(nodes) - 1
            mapping[name] = (nid, "body")
            stream = _Stream(nid, r_out, name, off_out)
            h //= 2
            w //= 2
            i += 1
            continue

        if kind == "sepconv":
            if i + 1 >= len(layers) or layers[i + 1].kind != "bounded_unit":
                raise ConversionError(f"{name}: separable conv must feed the "
                                      "clamp stage")
            cap_name = layers[i + 1].name
            kernel = compose_separable_kernel(params[f"{name}.dw"],
                                              params[f"{name}.pw"])
            qp, r_out = _range_of(calib, cap_name)
            u, theta, (qk,) = _charge_quant([(kernel, stream.r)], r_out, name)
            cout = kernel.shape[3]
            bias = params[f"{name}.bias"].astype(np.float64)
            if stream.off:
                spill = _offset_spill(qk, h, w)
                qb = _charge_array(bias / u - (stream.off / stream.r) * spill,
                                   name)
            else:
                qb = _bias_charges(bias, u, name)
            node = SnnNode("conv_if", name, [stream.node],
                           arrays={"kernel": qk,
                                   "bias": qb,
                                   "theta": np.full(cout, theta, dtype=np.int32)},
                           ints={"cap": _cap_counts(1.0, qp)},
                           scalars={"u": u, "r_in": stream.r, "r_out": r_out})
            nodes.append(node)
            nid = len(nodes) - 1
            mapping[name] = (nid, "body")
            mapping[cap_name] = (nid, "cap")
            stream = _Stream(nid, r_out, cap_name)
            i += 2
            continue

        if kind == "se":
            if stream.off:
                raise ConversionError(f"{name}: gain node cannot thin an "
                                      "offset-coded stream")
            node = SnnNode("gain_se", name, [stream.node],
                           arrays={"w1": params[f"{name}.w1"].astype(np.float64),
                                   "b1": params[f"{name}.b1"].astype(np.float64),
                                   "w2": params[f"{name}.w2"].astype(np.float64),
                                   "b2": params[f"{name}.b2"].astype(np.float64)},
                           scalars={"r_in": stream.r})
            nodes.append(node)
            nid = len(nodes) - 1
            mapping[name] = (nid, "body")
            stream = _Stream(nid, stream.r, name)
            i += 1
            continue

        if kind == "flatten":
            node = SnnNode("flatten", name, [stream.node],
                           scalars={"r_in": stream.r})
            nodes.append(node)
            nid = len(nodes) - 1
            mapping[name] = (nid, "body")
            stream = _Stream(nid, stream.r, name, stream.off)
            i += 1
            continue

        if kind == "dense":
            qp, r_out = _range_of(calib, name)
            w = params[f"{name}.w"].astype(np.float64)
            b = params[f"{name}.b"].astype(np.float64) + calib.logit_offset
            u, theta, (qw,) = _charge_quant([(w, stream.r)], r_out, name)
            kdim = w.shape[0]
            if stream.off:
                corr = (stream.off / stream.r) * qw.astype(np.float64).sum(axis=1)
                qb = _charge_array(b / u - corr, name)
            else:
                qb = _bias_charges(b, u, name)
            node = SnnNode("dense_if", name, [stream.node],
                           arrays={"w": qw,
                                   "bias": qb,
                                   "theta": np.full(kdim, theta, dtype=np.int32)},
                           ints={"cap": 0},
                           scalars={"u": u, "r_in": stream.r, "r_out": r_out})
            nodes.append(node)
            nid = len(nodes) - 1
            mapping[name] = (nid, "body")
            stream = _Stream(nid, r_out, name)
            i += 1
            continue

        raise ConversionError(f"{name}: cannot map layer kind {kind!r} to a "
                              "spiking operator")

    if nodes and nodes[-1].kind != "dense_if":
        raise ConversionError("model does not end in a classifier layer")
    missing = [l.name for l in layers if l.name not in mapping]
    if missing:
        raise ConversionError(f"layers left unmapped: {missing}")
    if len(set(mapping.values())) != len(mapping):
        raise ConversionError("operator mapping is not injective")
    return SpikingNetworkSpec(tuple(cfg.input_shape), cfg.num_classes,
                              calib.logit_offset, nodes, mapping,
                              len(nodes) - 1)


def convert(model: ModelSpec, params: dict, pixels, q=99.9):
    """fold + calibrate + map in one call. Returns (snn, folded, params', calib)."""
    folded, fparams = fold_batchnorm(model, params)
    calib = calibrate(folded, fparams, pixels, q=q)
    snn = map_operators(folded, fparams, calib)
    return snn, folded, fparams, calib


# ====== verification and cost ======

@dataclass
class VerifyReport:
    agreement: float
    max_dev: float
    mean_dev: float
    per_sample_dev: np.ndarray
    T: int
    n: int

    def as_dict(self):
        return {"agreement": self.agreement, "max_dev": self.max_dev,
                "mean_dev": self.mean_dev, "T": self.T, "n": self.n}


def verify_conversion(model: ModelSpec, params: dict, snn: SpikingNetworkSpec,
                      pixels, T, mode="even", rng=None):
    """Compare spiking inference against the folded model's quantized logits.

    Rate-decoded logits are counts * r / T - offset; the reference is the
    folded model's logits passed through the output stream's quantizer.
    Reports the per-sample max deviation and the argmax agreement fraction.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 4 or pixels.shape[0] == 0:
        raise ConversionError(f"probe set must be a non-empty [N,H,W,C] batch, "
                              f"got shape {pixels.shape}")
    out_node = snn.nodes[snn.output_node]
    r_out = out_node.scalars["r_out"]
    offset = snn.logit_offset
    qp = QuantParams(scale=r_out / 255.0, zero_point=0, signed=False)

    logits = forward_logits(model, params, pixels).astype(np.float64)
    ref = dequantize(quantize_tensor(logits + offset, qp)) - offset

    totals = simulate_many(snn, pixels, T, mode=mode, rng=rng)
    decoded = totals.astype(np.float64) * (r_out / T) - offset

    dev = np.abs(decoded - ref).max(axis=1)
    agreement = float(np.mean(np.argmax(totals, axis=1) == np.argmax(ref, axis=1)))
    return VerifyReport(agreement, float(dev.max()), float(dev.mean()),
                        dev, int(T), int(pixels.shape[0]))


def cost_report(snn: SpikingNetworkSpec, calib: CalibrationResult = None, T=64):
    """Static network cost plus, with calibration stats, expected event counts."""
    by_node = {}
    for layer, (nid, role) in snn.mapping.items():
        by_node.setdefault(nid, {})[role] = layer
    rows = []
    total_events = 0.0
    for nid, node in enumerate(snn.nodes):
        neurons = _node_out_elems(snn, nid)
        if node.kind == "conv_if":
            fan = int(np.prod(node.arrays["kernel"].shape[:3]))
        elif node.kind == "dense_if":
            fan = node.arrays["w"].shape[1]
        elif node.kind == "add_pool_if":
            fan = 1 + node.arrays["proj"].shape[2]
        else:
            fan = 0
        row = {"name": node.name, "kind": node.kind,
               "neurons": int(neurons), "synapses": int(fan * neurons)}
        if calib is not None:
            roles = by_node.get(nid, {})
            stream = roles.get("cap", roles.get("body", node.name))
            rate = calib.mean_rates.get(stream)
            if rate is not None:
                row["est_events"] = float(rate * T * neurons)
                total_events += row["est_events"]
        rows.append(row)
    report = {"T": int(T),
              "neurons": int(sum(r["neurons"] for r in rows)),
              "synapses": int(sum(r["synapses"] for r in rows)),
              "nodes": rows}
    if calib is not None:
        report["est_events"] = float(total_events)
    return report
