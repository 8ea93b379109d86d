"""Event-driven simulation of converted networks, plus spike-train utilities.

Scheduling is layer-wise over the full window: each node consumes its input
train for all T steps and emits its output train before the next node runs.
Within the integrate-and-fire nodes the per-step update is the usual
accumulate / fire-by-floor-division / reset-by-subtraction loop on int64
accumulators; steps whose input slice carries no events skip the synaptic
contraction and inject only the bias charge.

Count conventions: a train is an integer array [T, ...] (or [N, T, ...]
internally); emissions may exceed 1 per step. Rectification is implicit in
firing (negative potential never emits), caps bound cumulative emissions.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, SimulationError

MAX_STEPS = 65536

# elements per live train before the batched runner splits samples
_CHUNK_BUDGET = 50_000_000


def rate_encode(pixels, T, mode="even", rng=None):
    """Encode [0, 1] intensities into a 0/1 spike train of T steps.

    Even mode spikes at step t exactly when floor(a*t) crosses an integer,
    giving floor(a*T) total spikes. Poisson mode draws Bernoulli(a) per step
    and needs an rng.
    """
    a = np.asarray(pixels, dtype=np.float64)
    if not (1 <= int(T) <= MAX_STEPS):
        raise ConfigError(f"window length must be in [1, {MAX_STEPS}], got {T}")
    T = int(T)
    if a.size and (a.min() < 0 or a.max() > 1 + 1e-9):
        raise ShapeError("rate_encode expects intensities in [0, 1]")
    if mode == "even":
        t = np.arange(T + 1, dtype=np.float64).reshape((T + 1,) + (1,) * a.ndim)
        marks = np.floor(a[None] * t)
        return np.diff(marks, axis=0).astype(np.int8)
    if mode == "poisson":
        if rng is None:
            raise ConfigError("poisson encoding needs an rng")
        draws = rng.random((T,) + a.shape)
        return (draws < a[None]).astype(np.int8)
    raise ConfigError(f"unknown encoding mode {mode!r}")


@dataclass
class SpikeRecord:
    """Output-layer activity: per-step counts [T, K] and their totals [K]."""

    per_step: np.ndarray
    totals: np.ndarray

    @classmethod
    def from_train(cls, train):
        train = np.asarray(train)
        return cls(train.astype(np.int64), train.sum(axis=0, dtype=np.int64))


@dataclass(frozen=True)
class DecodeConfig:
    alpha: float = 1.0
    beta: float = 0.0
    T: int = 64

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"decode alpha must be positive, got {self.alpha}")
        if self.beta < 0 or not math.isfinite(self.beta):
            raise ConfigError(f"decode beta must be >= 0, got {self.beta}")
        if not (1 <= self.T <= MAX_STEPS):
            raise ConfigError(f"decode window must be in [1, {MAX_STEPS}], got {self.T}")


def temporal_weights(cfg):
    """Per-step weights w_t; uniform 1 when beta is 0, else exp(-beta*(T-t))."""
    t = np.arange(1, cfg.T + 1, dtype=np.float64)
    return np.exp(-cfg.beta * (cfg.T - t))


def decode_probs(record, cfg):
    """Class probabilities softmax(alpha * sum_t w_t * S_c(t))."""
    per_step = np.asarray(record.per_step, dtype=np.float64)
    if per_step.ndim != 2:
        raise ShapeError(f"decode expects [T, K] counts, got {per_step.shape}")
    if per_step.shape[0] != cfg.T:
        raise ShapeError(f"record has {per_step.shape[0]} steps, config says {cfg.T}")
    scores = cfg.alpha * (temporal_weights(cfg) @ per_step)
    z = scores - scores.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class ClassThresholds:
    theta: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=np.int64)
        if t.ndim != 1 or (t < 0).any():
            raise ConfigError("thresholds must be a 1-d array of counts >= 0")
        object.__setattr__(self, "theta", t)


def calibrate_thresholds(totals, labels):
    """Pick per-class count thresholds minimizing decision errors.

    The decision rule is count > theta. Candidates are the distinct observed
    counts for the class plus zero; ties go to the smallest threshold.
    """
    totals = np.asarray(totals, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if totals.ndim != 2 or labels.shape != (totals.shape[0],):
        raise ShapeError(f"need counts [N, K] with labels [N], got "
                         f"{totals.shape} and {labels.shape}")
    if totals.shape[0] == 0:
        raise ShapeError("cannot calibrate thresholds on an empty set")
    K = totals.shape[1]
    theta = np.zeros(K, dtype=np.int64)
    for c in range(K):
        counts = totals[:, c]
        pos = labels == c
        best_t, best_err = 0, None
        for cand in np.unique(np.concatenate([counts, [0]])):
            err = int(np.count_nonzero((counts > cand) != pos))
            if best_err is None or err < best_err:
                best_t, best_err = int(cand), err
        theta[c] = best_t
    return ClassThresholds(theta)


# ====== node runners ======
# All take [N, T, ...] int trains and return the same.

def _cap_effective(cap, T):
    if cap <= 0:
        return None
    return max(1, int(round(cap * T / 255.0)))


def _if_fire(charges, theta, cap_eff, out):
    """Run the accumulate/fire/reset loop over axis 1 of [N, T, ...] charges."""
    N, T = charges.shape[:2]
    V = np.zeros(charges.shape[:1] + charges.shape[2:], dtype=np.int64)
    emitted = np.zeros_like(V) if cap_eff is not None else None
    for t in range(T):
        V += charges[:, t]
        k = V // theta
        np.maximum(k, 0, out=k)
        if cap_eff is not None:
            np.minimum(k, cap_eff - emitted, out=k)
            emitted += k
        V -= k * theta
        out[:, t] = k
    return out


def _conv_charges(x_steps, kernel):
    """Exact integer conv via float64 contraction (magnitudes < 2**53)."""
    y, _ = ops.conv2d(x_steps.astype(np.float64), kernel, stride=1, padding="same")
    return np.rint(y).astype(np.int64)


def _run_conv_if(node, x, T):
    kernel = node.arrays["kernel"].astype(np.float64)
    bias = node.arrays["bias"].astype(np.int64)
    theta = node.arrays["theta"].astype(np.int64)
    cap_eff = _cap_effective(node.ints.get("cap", 0), T)
    N = x.shape[0]
    H, W = x.shape[2], x.shape[3]
    cout = kernel.shape[3]
    out = np.zeros((N, T, H, W, cout), dtype=np.int64)
    charges = np.empty((N, T, H, W, cout), dtype=np.int64)
    active = np.any(x.reshape(N, T, -1), axis=2)
    charges[:] = bias
    for n in range(N):
        steps = np.nonzero(active[n])[0]
        if steps.size:
            charges[n, steps] += _conv_charges(x[n, steps], kernel)
    return _if_fire(charges, theta, cap_eff, out)


def _run_dense_if(node, x, T):
    w = node.arrays["w"].astype(np.float64)
    bias = node.arrays["bias"].astype(np.int64)
    theta = node.arrays["theta"].astype(np.int64)
    cap_eff = _cap_effective(node.ints.get("cap", 0), T)
    if x.ndim != 3:
        raise SimulationError(f"{node.name}: dense input train must be [N, T, D], "
                              f"got {x.shape}")
    charges = np.rint(x.astype(np.float64) @ w.T).astype(np.int64) + bias
    out = np.zeros(charges.shape, dtype=np.int64)
    return _if_fire(charges, theta, cap_eff, out)


def _run_add_pool_if(node, a, b, T):
    alpha = node.arrays["alpha"].astype(np.int64)
    proj = node.arrays["proj"].astype(np.float64)
    theta = node.arrays["theta"].astype(np.int64)
    bias = node.arrays.get("bias")
    N, _, H, W, C = a.shape
    charges = a.astype(np.int64) * alpha
    flat_b = b.reshape((-1,) + b.shape[2:]).astype(np.float64)
    pj, _ = ops.conv2d(flat_b, proj, stride=1, padding="same")
    charges += np.rint(pj).astype(np.int64).reshape(b.shape[:2] + pj.shape[1:])
    if bias is not None:
        charges += bias.astype(np.int64)
    fired = np.zeros_like(charges)
    _if_fire(charges, theta, None, fired)
    out = np.zeros((N, T, H // 2, W // 2, C), dtype=np.int64)
    cum = np.zeros((N, H, W, C), dtype=np.int64)
    prev = np.zeros((N, H // 2, W // 2, C), dtype=np.int64)
    for t in range(T):
        cum += fired[:, t]
        pooled = cum.reshape(N, H // 2, 2, W // 2, 2, C).max(axis=(2, 4))
        out[:, t] = pooled - prev
        prev = pooled
    return out


def thin_counts(train, gains):
    """Scale a count train by per-neuron gains in [0, 1] without losing rate.

    Output cumulative counts track floor(g * input cumulative counts), so each
    step emits the increment and totals come out to floor(g * total).
    """
    train = np.asarray(train)
    g = np.asarray(gains, dtype=np.float64)
    T = train.shape[0]
    out = np.zeros_like(train, dtype=np.int64)
    cum = np.zeros(train.shape[1:], dtype=np.int64)
    prev = np.zeros(train.shape[1:], dtype=np.int64)
    for t in range(T):
        cum += train[t]
        cur = np.floor(g * cum).astype(np.int64)
        out[t] = cur - prev
        prev = cur
    return out


def count_max_pool2(train):
    """2x2 max pooling in the count domain: running max of cumulative counts."""
    train = np.asarray(train)
    T, H, W, C = train.shape
    out = np.zeros((T, H // 2, W // 2, C), dtype=np.int64)
    cum = np.zeros((H, W, C), dtype=np.int64)
    prev = np.zeros((H // 2, W // 2, C), dtype=np.int64)
    for t in range(T):
        cum += train[t]
        pooled = cum.reshape(H // 2, 2, W // 2, 2, C).max(axis=(1, 3))
        out[t] = pooled - prev
        prev = pooled
    return out


def _thin_batch(x, g, T):
    out = np.zeros_like(x, dtype=np.int64)
    cum = np.zeros(x.shape[:1] + x.shape[2:], dtype=np.int64)
    prev = np.zeros_like(cum)
    for t in range(T):
        cum += x[:, t]
        cur = np.floor(g * cum).astype(np.int64)
        out[:, t] = cur - prev
        prev = cur
    return out


def _run_gain_eca(node, x, T):
    r_in = node.scalars["r_in"]
    totals = x.sum(axis=1, dtype=np.int64)
    values = totals.astype(np.float64) * (r_in / T)
    h, _ = ops.depthwise_conv2d(values, node.arrays["dw"], stride=1, padding="same")
    h += node.arrays["dw_bias"]
    z, _ = ops.conv2d(h, node.arrays["pw"], node.arrays["pw_bias"],
                      stride=1, padding="same")
    g, _ = ops.sigmoid(z)
    return _thin_batch(x, g, T)


def _run_gain_se(node, x, T):
    r_in = node.scalars["r_in"]
    totals = x.sum(axis=1, dtype=np.int64)
    values = totals.astype(np.float64) * (r_in / T)
    m = values.mean(axis=(1, 2))
    h = np.maximum(m @ node.arrays["w1"].T + node.arrays["b1"], 0.0)
    z = h @ node.arrays["w2"].T + node.arrays["b2"]
    g, _ = ops.sigmoid(z)
    return _thin_batch(x, g[:, None, None, :], T)


def _run_flatten(node, x, T):
    return x.reshape(x.shape[0], T, -1)


def simulate(spec, trains, trace=False):
    """Run one sample's spike train [T, ...] through the network.

    Returns (SpikeRecord, stats). Stats carry total and per-node event counts;
    with trace=True they also include per-step event rows
    (step, node, neuron, count) for every nonzero emission.
    """
    trains = np.asarray(trains)
    out_train, stats, traces = _simulate_batch(spec, trains[None], trace=trace)
    record = SpikeRecord.from_train(out_train[0])
    if trace:
        stats = dict(stats)
        stats["trace_rows"] = traces
    return record, stats


def _check_input(spec, trains):
    if trains.ndim != 2 + len(spec.input_shape):
        raise ShapeError(f"input train must be [N, T, {', '.join(map(str, spec.input_shape))}], "
                         f"got shape {trains.shape}")
    if tuple(trains.shape[2:]) != tuple(spec.input_shape):
        raise ShapeError(f"input train shape {trains.shape[2:]} does not match "
                         f"network input {spec.input_shape}")
    if trains.shape[1] < 1 or trains.shape[1] > MAX_STEPS:
        raise ShapeError(f"window length {trains.shape[1]} out of range")


_RUNNERS = {
    "conv_if": _run_conv_if,
    "dense_if": _run_dense_if,
    "gain_eca": _run_gain_eca,
    "gain_se": _run_gain_se,
    "flatten": _run_flatten,
}


def _simulate_batch(spec, trains, trace=False):
    _check_input(spec, trains)
    N, T = trains.shape[:2]
    live = {-1: trains}
    uses = {-1: 0}
    for nid, node in enumerate(spec.nodes):
        uses[nid] = 0
        for src in node.inputs:
            uses[src] = uses.get(src, 0) + 1
    uses[spec.output_node] += 1

    per_node = {}
    traces = []
    for nid, node in enumerate(spec.nodes):
        ins = [live[src] for src in node.inputs]
        if node.kind == "add_pool_if":
            out = _run_add_pool_if(node, ins[0], ins[1], T)
        else:
            out = _RUNNERS[node.kind](node, ins[0], T)
        if out.size and out.max() >= 2**31:
            raise SimulationError(f"{node.name}: spike count overflow")
        per_node[node.name] = int(out.sum(dtype=np.int64))
        if trace:
            ns, ts, *rest = np.nonzero(out)
            flat = np.ravel_multi_index(rest, out.shape[2:]) if rest else \
                np.zeros_like(ts)
            for i in range(ts.size):
                traces.append((int(ts[i]), node.name, int(flat[i]),
                               int(out[(ns[i], ts[i], *[r[i] for r in rest])])))
        live[nid] = out
        for src in node.inputs:
            uses[src] -= 1
            if uses[src] == 0:
                del live[src]
    stats = {"total_events": int(sum(per_node.values())), "per_node": per_node}
    return live[spec.output_node], stats, traces


def simulate_many(spec, pixel_batch, T, mode="even", rng=None):
    """Encode and simulate a batch of samples; returns totals [N, K].

    Samples are split into memory-bounded chunks; results are identical to
    running simulate() per sample.
    """
    pixels = np.asarray(pixel_batch)
    if pixels.ndim != 1 + len(spec.input_shape):
        raise ShapeError(f"expected a batch of inputs shaped {spec.input_shape}, "
                         f"got {pixels.shape}")
    n = pixels.shape[0]
    per_sample = int(T) * int(np.prod(spec.input_shape, dtype=np.int64))
    widest = max(per_sample, *(
        int(T) * _node_out_elems(spec, nid) for nid in range(len(spec.nodes))))
    chunk = max(1, _CHUNK_BUDGET // max(widest, 1))
    totals = np.zeros((n, spec.num_classes), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        trains = rate_encode(pixels[lo:hi], T, mode=mode, rng=rng)
        out, _, _ = _simulate_batch(spec, np.moveaxis(trains, 0, 1))
        totals[lo:hi] = out.sum(axis=1, dtype=np.int64)
    return totals


def _node_out_elems(spec, nid):
    # static output size per sample, for chunk sizing only
    shapes = {-1: tuple(spec.input_shape)}
    for i, node in enumerate(spec.nodes[: nid + 1]):
        src = shapes[node.inputs[0]]
        if node.kind == "conv_if":
            shapes[i] = src[:2] + (node.arrays["kernel"].shape[3],)
        elif node.kind == "add_pool_if":
            shapes[i] = (src[0] // 2, src[1] // 2, node.arrays["alpha"].shape[0])
        elif node.kind == "dense_if":
            shapes[i] = (node.arrays["w"].shape[0],)
        elif node.kind == "flatten":
            shapes[i] = (int(np.prod(src, dtype=np.int64)),)
        else:
            shapes[i] = src
    return int(np.prod(shapes[nid], dtype=np.int64))


@dataclass
class PredictResult:
    class_id: int
    probs: np.ndarray
    totals: np.ndarray
    suppressed: np.ndarray
    stats: dict = field(default_factory=dict)


def predict(spec, pixels, decode_cfg, thresholds=None, mode="even", rng=None,
            trace=False):
    """Full inference for one sample: encode, simulate, decode, threshold.

    Classes whose spike count fails its threshold are suppressed before the
    argmax; if every class is suppressed the plain argmax over probabilities
    decides.
    """
    trains = rate_encode(pixels, decode_cfg.T, mode=mode, rng=rng)
    record, stats = simulate(spec, trains, trace=trace)
    probs = decode_probs(record, decode_cfg)
    totals = record.totals
    if thresholds is not None:
        theta = thresholds.theta
        if theta.shape != totals.shape:
            raise ShapeError(f"thresholds cover {theta.shape[0]} classes, "
                             f"network has {totals.shape[0]}")
        eligible = totals > theta
    else:
        eligible = np.ones_like(totals, dtype=bool)
    if eligible.any():
        masked = np.where(eligible, probs, -1.0)
        cls = int(np.argmax(masked))
    else:
        cls = int(np.argmax(probs))
    return PredictResult(cls, probs, totals, ~eligible, stats)
