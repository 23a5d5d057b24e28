"""Intensity-controlled low-rank detect/correct adapters.

Each adapted affine layer computes

    y = W x + b + alpha * beta * v_cor (v_det^T x)

where v_det (n, d) projects the input onto d detection directions, v_cor
(m, d) maps detections to output-space corrections, beta is one learnable
scalar per layer, and alpha is the global inference-time intensity.  At
alpha = 0 the adapter term is skipped entirely, so outputs are bit-for-bit
the base model's.  Several adapters compose additively; entries are kept in
a canonical digest order so composition is insensitive to how callers order
the set, down to the last bit.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FingerprintError, FormatError
from .fileio import read_container, unpack_arrays, write_container
from .model import DiffusionModel, adaptable_layers, fingerprint
from .tensor import Tensor

ADAPTER_MAGIC = b"UFOA"

# default attachment points: the temporal-attention query/value/output
# projections, where cross-frame information flows
DEFAULT_TARGET_PIECES = ("q", "v", "proj")


def default_targets(model_or_cfg) -> list[str]:
    names = [name for name, _, _ in adaptable_layers(model_or_cfg)]
    return [n for n in names
            if ".tattn." in n and n.rsplit(".", 1)[1] in DEFAULT_TARGET_PIECES]


def adapted_linear(w, x, v_det, v_cor, beta, alpha, bias=None) -> Tensor:
    """The adapted affine map; `x` may be a single vector or batched rows."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    x = x if isinstance(x, Tensor) else Tensor(x)
    v_det = v_det if isinstance(v_det, Tensor) else Tensor(v_det)
    v_cor = v_cor if isinstance(v_cor, Tensor) else Tensor(v_cor)
    if w.ndim != 2:
        raise DimensionError(f"weight must be 2-D (m, n), got {w.shape}")
    m, n = w.shape
    if v_det.ndim != 2 or v_cor.ndim != 2 or v_det.shape[1] != v_cor.shape[1]:
        raise DimensionError(f"detector {v_det.shape} and corrector {v_cor.shape} must share rank d")
    if v_det.shape[0] != n or v_cor.shape[0] != m:
        raise DimensionError(
            f"detector {v_det.shape}/corrector {v_cor.shape} do not fit weight {w.shape}")
    single = x.ndim == 1
    x2 = T.reshape(x, (1, n)) if single else T.reshape(x, (-1, x.shape[-1]))
    if x2.shape[-1] != n:
        raise DimensionError(f"input width {x.shape} does not match weight {w.shape}")
    y = T.matmul(x2, T.transpose(w))
    if bias is not None:
        bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        y = T.add(y, bias)
    alpha = float(alpha)
    if alpha != 0.0:
        beta_t = beta if isinstance(beta, Tensor) else Tensor(np.asarray(beta, dtype=y.dtype))
        detect = T.matmul(x2, v_det)                  # (rows, d)
        correct = T.matmul(detect, T.transpose(v_cor))  # (rows, m)
        y = T.add(y, T.mul(correct, T.mul(beta_t, alpha)))
    if single:
        return T.reshape(y, (m,))
    return T.reshape(y, x.shape[:-1] + (m,))


@dataclass
class AdapterLayer:
    v_det: Tensor  # (n, d)
    v_cor: Tensor  # (m, d)
    beta: Tensor   # scalar


KINDS = ("consistency", "stylization")
RECOMMENDED_ALPHA = {"consistency": 0.1, "stylization": 1.0}


@dataclass
class UfoAdapter:
    rank: int
    fingerprint: str
    layers: "OrderedDict[str, AdapterLayer]"
    kind: str = "consistency"
    recommended_alpha: float = 0.1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not (0.0 <= self.recommended_alpha <= 1.0):
            raise ContractError(
                f"recommended_alpha must lie in [0, 1], got {self.recommended_alpha}")

    def parameter_count(self) -> int:
        # d * (m + n) + 1 per adapted layer
        return sum(l.v_det.size + l.v_cor.size + 1 for l in self.layers.values())

    def set_trainable(self, flag: bool) -> None:
        for layer in self.layers.values():
            for t in (layer.v_det, layer.v_cor, layer.beta):
                t.requires_grad = flag
                t.grad = None

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, layer in self.layers.items():
            out[f"{name}.v_det"] = layer.v_det
            out[f"{name}.v_cor"] = layer.v_cor
            out[f"{name}.beta"] = layer.beta
        return out


def init_adapter(model: DiffusionModel, rank: int = 4, targets=None, seed: int = 0,
                 kind: str = "consistency", recommended_alpha: float | None = None,
                 meta: dict | None = None) -> UfoAdapter:
    """Fresh adapter: detectors are random, correctors zero, betas one.

    Zero correctors make the fresh adapter an exact no-op at any intensity
    while still passing gradient to the detectors after the first update.
    When `recommended_alpha` is None it defaults by kind (consistency 0.1,
    stylization 1.0).
    """
    if not isinstance(rank, int) or rank < 1:
        raise ContractError(f"rank must be a positive integer, got {rank!r}")
    if recommended_alpha is None:
        if kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {kind!r}")
        recommended_alpha = RECOMMENDED_ALPHA[kind]
    layer_shapes = {name: (m, n) for name, m, n in adaptable_layers(model)}
    targets = list(targets) if targets is not None else default_targets(model)
    if not targets:
        raise ContractError("adapter needs at least one target layer")
    unknown = [t for t in targets if t not in layer_shapes]
    if unknown:
        raise ContractError(f"targets {unknown} are not adaptable layers of this model")
    rng = np.random.default_rng(seed)
    dt = model.config.np_dtype
    layers: "OrderedDict[str, AdapterLayer]" = OrderedDict()
    for name in sorted(targets, key=lambda t: list(layer_shapes).index(t)):
        m, n = layer_shapes[name]
        layers[name] = AdapterLayer(
            v_det=Tensor((rng.normal(size=(n, rank)) / np.sqrt(n)).astype(dt), requires_grad=True),
            v_cor=Tensor(np.zeros((m, rank), dtype=dt), requires_grad=True),
            beta=Tensor(np.asarray(1.0, dtype=dt), requires_grad=True),
        )
    return UfoAdapter(rank, fingerprint(model), layers, kind,
                      float(recommended_alpha), dict(meta or {}))


def adapter_digest(adapter: UfoAdapter) -> str:
    """Content hash used only to order adapters canonically inside a stack."""
    h = hashlib.sha256()
    h.update(f"{adapter.rank}|{adapter.fingerprint}".encode())
    for name, layer in adapter.layers.items():
        h.update(name.encode())
        for t in (layer.v_det, layer.v_cor, layer.beta):
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


class AdapterStack:
    """A canonically ordered set of (adapter, intensity) pairs.

    The stack adds each adapter's correction term to adapted layers in digest
    order, so composing the same set in any order yields identical bits.
    """

    def __init__(self, entries):
        cleaned = []
        for adapter, alpha in entries:
            if not isinstance(adapter, UfoAdapter):
                raise ContractError("stack entries must be (UfoAdapter, alpha) pairs")
            alpha = float(alpha)
            if not (0.0 <= alpha <= 1.0):
                raise ContractError(f"intensity must lie in [0, 1], got {alpha}")
            cleaned.append((adapter, alpha))
        fps = {a.fingerprint for a, _ in cleaned}
        if len(fps) > 1:
            raise FingerprintError("stacked adapters were trained against different architectures")
        self.entries = sorted(cleaned, key=lambda e: (adapter_digest(e[0]), e[1]))

    def check_model(self, model: DiffusionModel) -> None:
        fp = fingerprint(model)
        for adapter, _ in self.entries:
            if adapter.fingerprint != fp:
                raise FingerprintError(
                    f"adapter fingerprint {adapter.fingerprint[:12]}... does not match "
                    f"model fingerprint {fp[:12]}...")

    def apply(self, name: str, x2: Tensor, y: Tensor) -> Tensor:
        for adapter, alpha in self.entries:
            if alpha == 0.0:
                continue
            layer = adapter.layers.get(name)
            if layer is None:
                continue
            detect = T.matmul(x2, layer.v_det)
            correct = T.matmul(detect, T.transpose(layer.v_cor))
            y = T.add(y, T.mul(correct, T.mul(layer.beta, alpha)))
        return y


def attach(model: DiffusionModel, adapter: UfoAdapter, alpha: float) -> AdapterStack:
    stack = AdapterStack([(adapter, alpha)])
    stack.check_model(model)
    return stack


def compose(model: DiffusionModel, pairs) -> AdapterStack:
    stack = AdapterStack(list(pairs))
    stack.check_model(model)
    return stack


def _entry_parts(entry):
    if isinstance(entry, AdapterLayer):
        return entry.v_det, entry.v_cor, entry.beta
    v_det, v_cor, beta = entry
    return v_det, v_cor, beta


def delta_identity_check(x_t, x_tn, w, entry, alpha) -> float:
    """Residual of the adapted-difference decomposition.

    For two inputs the output difference must split into the base part and
    the correction part:  Δy = W Δx + αβ·v_cor (v_detᵀ x_t − v_detᵀ x_tn).
    Both sides are evaluated independently at float64; returns max |LHS − RHS|.
    """
    def as64(t):
        return np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)

    v_det, v_cor, beta = _entry_parts(entry)
    x_t, x_tn, w = as64(x_t), as64(x_tn), as64(w)
    v_det, v_cor, beta = as64(v_det), as64(v_cor), as64(beta)
    if x_t.shape != x_tn.shape:
        raise DimensionError(f"inputs must share a shape, got {x_t.shape} vs {x_tn.shape}")
    with T.no_grad():
        y_t = adapted_linear(w, x_t, v_det, v_cor, beta, alpha).data
        y_tn = adapted_linear(w, x_tn, v_det, v_cor, beta, alpha).data
    lhs = y_t - y_tn
    rhs = ((x_t - x_tn) @ w.T
           + float(alpha) * beta * ((x_t @ v_det) - (x_tn @ v_det)) @ v_cor.T)
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


def transfer(adapter: UfoAdapter, target: DiffusionModel,
             alpha: float | None = None) -> AdapterStack:
    """Attach an adapter trained elsewhere to a same-architecture model.

    Defaults the intensity to the adapter's recommended_alpha.  On fingerprint
    mismatch the error names the first adapted layer the target lacks or
    shapes differently.
    """
    if adapter.fingerprint != fingerprint(target):
        have = {name: (m, n) for name, m, n in adaptable_layers(target)}
        for name, layer in adapter.layers.items():
            shape = (layer.v_cor.shape[0], layer.v_det.shape[0])
            if name not in have:
                raise FingerprintError(f"target has no adaptable layer {name!r} "
                                       f"(adapter expects shape {shape})")
            if have[name] != shape:
                raise FingerprintError(f"layer {name!r} has shape {have[name]} "
                                       f"on the target but {shape} in the adapter")
        raise FingerprintError(
            "target architecture differs outside the adapted layers "
            f"(fingerprint {fingerprint(target)[:12]}... vs {adapter.fingerprint[:12]}...)")
    return attach(target, adapter,
                  adapter.recommended_alpha if alpha is None else alpha)


# ---------------------------------------------------------------------------
# adapter I/O (UFOA container)
# ---------------------------------------------------------------------------

def save_adapter(adapter: UfoAdapter, path) -> None:
    names = list(adapter.layers.keys())
    header = {
        "kind": adapter.kind,
        "recommended_alpha": adapter.recommended_alpha,
        "rank": adapter.rank,
        "fingerprint": adapter.fingerprint,
        "layer_names": names,
        "layer_shapes": [[adapter.layers[n].v_cor.shape[0],
                          adapter.layers[n].v_det.shape[0]] for n in names],
        "meta": adapter.meta,
    }
    arrays = []
    for n in names:
        layer = adapter.layers[n]
        arrays.extend([layer.v_det.data, layer.v_cor.data, layer.beta.data])
    write_container(path, ADAPTER_MAGIC, header, arrays)


def load_adapter(path) -> UfoAdapter:
    header, payload, at = read_container(path, ADAPTER_MAGIC)
    for key in ("rank", "fingerprint", "layer_names", "layer_shapes",
                "kind", "recommended_alpha"):
        if key not in header:
            raise FormatError(f"adapter header is missing '{key}'")
    rank = header["rank"]
    if not isinstance(rank, int) or rank < 1:
        raise FormatError(f"adapter rank must be a positive integer, got {rank!r}")
    kind = header["kind"]
    if kind not in KINDS:
        raise FormatError(f"adapter kind must be one of {KINDS}, got {kind!r}")
    rec_alpha = header["recommended_alpha"]
    if not isinstance(rec_alpha, (int, float)) or not 0.0 <= rec_alpha <= 1.0:
        raise FormatError(f"recommended_alpha must lie in [0, 1], got {rec_alpha!r}")
    names = header["layer_names"]
    shapes = header["layer_shapes"]
    if (not isinstance(names, list) or not isinstance(shapes, list)
            or len(names) != len(shapes) or not names):
        raise FormatError("adapter layer registry is malformed")
    specs = []
    for name, shape in zip(names, shapes):
        if (not isinstance(shape, list) or len(shape) != 2
                or not all(isinstance(s, int) and s > 0 for s in shape)):
            raise FormatError(f"bad layer shape {shape!r} for '{name}'")
        m, n = shape
        specs.extend([(f"{name}.v_det", (n, rank)), (f"{name}.v_cor", (m, rank)),
                      (f"{name}.beta", ())])
    arrays = unpack_arrays(payload, at, specs)
    layers: "OrderedDict[str, AdapterLayer]" = OrderedDict()
    for name in names:
        layers[name] = AdapterLayer(
            v_det=Tensor(arrays[f"{name}.v_det"]),
            v_cor=Tensor(arrays[f"{name}.v_cor"]),
            beta=Tensor(arrays[f"{name}.beta"]),
        )
    meta = header.get("meta", {})
    return UfoAdapter(rank, header["fingerprint"], layers, kind, float(rec_alpha),
                      meta if isinstance(meta, dict) else {})
