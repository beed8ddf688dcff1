"""Two-level gated-attention aggregator with a growing linear head.

The aggregator pools k*k patch tokens into a region token, refines it into a
region feature z_i, and pools the region features into one slide embedding.
A linear alignment map followed by row-wise L2 normalization projects region
features into the prototype embedding space. All gradients are derived by
hand for exactly this architecture; there is no generic autodiff here.

Shape conventions (row vectors throughout):
    patches   [N_r, k*k, d_vis]     regions [N_r, d_vis]
    z         [N_r, d_model]        slide embedding h [d_model]
    logits    [C_total]             aligned rows [N_r, C_text]
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, NonFiniteError
from .losses import (
    LossWeights,
    cross_entropy,
    infonce,
    infonce_gradient,
    ppgd,
    ppgd_gradient,
    self_similarity,
    self_similarity_gradients,
)
from .prototypes import PrototypeBuffer


@dataclass(eq=False)
class SlideFeatures:
    """One sample: a bag of region features with per-region patch blocks.

    Feature payloads are held as float32 (the on-disk precision); model math
    upcasts to float64. global_class = task class offset + class_in_task,
    validated against the manifest at load time.
    """

    slide_id: str
    task_index: int
    class_in_task: int
    global_class: int
    regions: np.ndarray   # [N_r, d_vis]
    patches: np.ndarray   # [N_r, k*k, d_vis]

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float32)
        self.patches = np.asarray(self.patches, dtype=np.float32)
        if self.regions.ndim != 2 or self.patches.ndim != 3:
            raise DimensionError(
                f"regions must be 2-D and patches 3-D, got {self.regions.shape} "
                f"and {self.patches.shape}"
            )
        n_r, d_vis = self.regions.shape
        if n_r < 1:
            raise DimensionError("a slide needs at least one region")
        if self.patches.shape[0] != n_r or self.patches.shape[2] != d_vis:
            raise DimensionError(
                f"patch block {self.patches.shape} inconsistent with regions "
                f"{self.regions.shape}"
            )
        k2 = self.patches.shape[1]
        if k2 < 1 or int(round(k2 ** 0.5)) ** 2 != k2:
            raise DimensionError(f"patches-per-region {k2} is not a square k*k")
        if not (np.isfinite(self.regions).all() and np.isfinite(self.patches).all()):
            raise NonFiniteError("non-finite feature values", context=self.slide_id)

    @property
    def n_regions(self) -> int:
        return self.regions.shape[0]

    @property
    def k(self) -> int:
        return int(round(self.patches.shape[1] ** 0.5))

    @property
    def d_vis(self) -> int:
        return self.regions.shape[1]


@dataclass(frozen=True)
class ModelDims:
    d_vis: int
    d_model: int
    d_attn: int
    c_text: int
    c_total: int

    def __post_init__(self):
        for name in ("d_vis", "d_model", "d_attn", "c_text", "c_total"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(eq=False)
class GatedAttentionParams:
    """Gated attention scorer: w^T (tanh(x V) * sigmoid(x U))."""

    V: np.ndarray  # [d_in, d_attn]
    U: np.ndarray  # [d_in, d_attn]
    w: np.ndarray  # [d_attn]


@dataclass(eq=False)
class ModelParams:
    patch_proj_w: np.ndarray   # [d_vis, d_model]
    patch_proj_b: np.ndarray   # [d_model]
    patch_attn: GatedAttentionParams
    region_proj_w: np.ndarray  # [d_vis, d_model]
    region_proj_b: np.ndarray  # [d_model]
    region_mlp_w: np.ndarray   # [d_model, d_model]
    region_mlp_b: np.ndarray   # [d_model]
    slide_attn: GatedAttentionParams
    align_g: np.ndarray        # [d_model, C_text]
    head_w: np.ndarray         # [d_model, C_total]
    head_b: np.ndarray         # [C_total]

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            d_vis=self.patch_proj_w.shape[0],
            d_model=self.patch_proj_w.shape[1],
            d_attn=self.patch_attn.w.shape[0],
            c_text=self.align_g.shape[1],
            c_total=self.head_w.shape[1],
        )


def param_items(params: ModelParams):
    """(name, array) pairs in the canonical traversal order."""
    return [
        ("patch_proj_w", params.patch_proj_w),
        ("patch_proj_b", params.patch_proj_b),
        ("patch_attn.V", params.patch_attn.V),
        ("patch_attn.U", params.patch_attn.U),
        ("patch_attn.w", params.patch_attn.w),
        ("region_proj_w", params.region_proj_w),
        ("region_proj_b", params.region_proj_b),
        ("region_mlp_w", params.region_mlp_w),
        ("region_mlp_b", params.region_mlp_b),
        ("slide_attn.V", params.slide_attn.V),
        ("slide_attn.U", params.slide_attn.U),
        ("slide_attn.w", params.slide_attn.w),
        ("align_g", params.align_g),
        ("head_w", params.head_w),
        ("head_b", params.head_b),
    ]


def zeros_like_params(params: ModelParams) -> ModelParams:
    z = lambda a: np.zeros_like(a)
    return ModelParams(
        patch_proj_w=z(params.patch_proj_w),
        patch_proj_b=z(params.patch_proj_b),
        patch_attn=GatedAttentionParams(
            V=z(params.patch_attn.V), U=z(params.patch_attn.U), w=z(params.patch_attn.w)
        ),
        region_proj_w=z(params.region_proj_w),
        region_proj_b=z(params.region_proj_b),
        region_mlp_w=z(params.region_mlp_w),
        region_mlp_b=z(params.region_mlp_b),
        slide_attn=GatedAttentionParams(
            V=z(params.slide_attn.V), U=z(params.slide_attn.U), w=z(params.slide_attn.w)
        ),
        align_g=z(params.align_g),
        head_w=z(params.head_w),
        head_b=z(params.head_b),
    )


def copy_params(params: ModelParams) -> ModelParams:
    out = zeros_like_params(params)
    for (_, dst), (_, src) in zip(param_items(out), param_items(params)):
        dst[...] = src
    return out


def add_params_(dst: ModelParams, src: ModelParams) -> ModelParams:
    for (_, d), (_, s) in zip(param_items(dst), param_items(src)):
        d += s
    return dst


def params_checksum(params: ModelParams) -> str:
    """SHA-256 over names, shapes, and float64 payloads in canonical order."""
    h = hashlib.sha256()
    for name, arr in param_items(params):
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Scaled-uniform init (scale 1/sqrt(fan_in)), zero biases, seeded."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    def gated(d_in):
        return GatedAttentionParams(
            V=uniform((d_in, dims.d_attn), d_in),
            U=uniform((d_in, dims.d_attn), d_in),
            w=uniform((dims.d_attn,), dims.d_attn),
        )

    return ModelParams(
        patch_proj_w=uniform((dims.d_vis, dims.d_model), dims.d_vis),
        patch_proj_b=np.zeros(dims.d_model),
        patch_attn=gated(dims.d_model),
        region_proj_w=uniform((dims.d_vis, dims.d_model), dims.d_vis),
        region_proj_b=np.zeros(dims.d_model),
        region_mlp_w=uniform((dims.d_model, dims.d_model), dims.d_model),
        region_mlp_b=np.zeros(dims.d_model),
        slide_attn=gated(dims.d_model),
        align_g=uniform((dims.d_model, dims.c_text), dims.d_model),
        head_w=uniform((dims.d_model, dims.c_total), dims.d_model),
        head_b=np.zeros(dims.c_total),
    )


@dataclass(eq=False)
class ForwardTrace:
    """Activations cached by one forward pass.

    Attention rows and probs are simplex points. ``cache`` keeps the
    intermediates the backward pass needs; it is an implementation detail.
    """

    patch_attention: np.ndarray    # [N_r, k*k]
    region_features_z: np.ndarray  # [N_r, d_model]
    aligned_gz: np.ndarray         # [N_r, C_text]
    slide_attention: np.ndarray    # [N_r]
    slide_embedding: np.ndarray    # [d_model]
    logits: np.ndarray             # [C_total]
    probs: np.ndarray              # [C_total]
    cache: dict = field(default_factory=dict, repr=False)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax(x, axis=-1):
    mx = x.max(axis=axis, keepdims=True)
    e = np.exp(x - mx)
    return e / e.sum(axis=axis, keepdims=True)


def _check_dims(params: ModelParams, s: SlideFeatures):
    dims = params.dims
    if s.d_vis != dims.d_vis:
        raise DimensionError(
            f"slide {s.slide_id!r} has d_vis={s.d_vis}, model expects {dims.d_vis}"
        )


def forward(params: ModelParams, s: SlideFeatures) -> ForwardTrace:
    """Run the aggregator, head, and alignment map on one slide."""
    _check_dims(params, s)
    X = s.patches.astype(np.float64)   # [N_r, k2, d_vis]
    R = s.regions.astype(np.float64)   # [N_r, d_vis]

    # Patch tokens and gated-attention pooling inside each region.
    U_tok = np.tanh(X @ params.patch_proj_w + params.patch_proj_b)  # [N_r, k2, dm]
    T1 = np.tanh(U_tok @ params.patch_attn.V)
    S1 = _sigmoid(U_tok @ params.patch_attn.U)
    G1 = T1 * S1
    e1 = G1 @ params.patch_attn.w                                   # [N_r, k2]
    a = _softmax(e1, axis=1)
    m = np.einsum("rj,rjd->rd", a, U_tok)                           # [N_r, dm]

    # Region projection branch plus the shared refinement layer.
    C_act = np.tanh(R @ params.region_proj_w + params.region_proj_b)
    t_tok = m + C_act
    Z = np.tanh(t_tok @ params.region_mlp_w + params.region_mlp_b)  # [N_r, dm]

    # Gated-attention pooling across regions.
    T2 = np.tanh(Z @ params.slide_attn.V)
    S2 = _sigmoid(Z @ params.slide_attn.U)
    G2 = T2 * S2
    e2 = G2 @ params.slide_attn.w                                   # [N_r]
    att = _softmax(e2, axis=0)
    h = att @ Z                                                     # [dm]

    logits = h @ params.head_w + params.head_b
    probs = _softmax(logits, axis=0)

    g_raw = Z @ params.align_g                                      # [N_r, C_text]
    norms = np.linalg.norm(g_raw, axis=1)
    if np.any(norms == 0.0):
        raise NonFiniteError("alignment row collapsed to zero", context=s.slide_id)
    gz = g_raw / norms[:, None]

    cache = dict(
        X=X, R=R, U_tok=U_tok, T1=T1, S1=S1, G1=G1, a=a,
        C_act=C_act, t_tok=t_tok, Z=Z, T2=T2, S2=S2, G2=G2, att=att,
        h=h, probs=probs, norms=norms, gz=gz,
    )
    return ForwardTrace(
        patch_attention=a,
        region_features_z=Z,
        aligned_gz=gz,
        slide_attention=att,
        slide_embedding=h,
        logits=logits,
        probs=probs,
        cache=cache,
    )


def logit_head_gradient(trace: ForwardTrace, class_index: int) -> np.ndarray:
    """Derivative of one pre-softmax logit w.r.t. its own head column.

    The head is linear, so the derivative of logit j with respect to head
    column j is the slide embedding itself; every other column's derivative
    is identically zero and never materialized.
    """
    if not 0 <= class_index < trace.logits.shape[0]:
        raise IndexError(
            f"class index {class_index} out of range for {trace.logits.shape[0]} logits"
        )
    return trace.slide_embedding.copy()


@dataclass
class ReplayTarget:
    """A replayed slide plus the head gradient stored when it entered the buffer."""

    slide: SlideFeatures
    target: int
    stored_grad: np.ndarray
    trace: ForwardTrace | None = None


@dataclass
class StepTargets:
    """Everything the objective needs besides the current slide itself."""

    target: int
    prototypes: PrototypeBuffer | None = None
    replay: tuple = ()


def _backprop_slide(params, s, cache, d_logits, d_h_extra, d_z_extra, d_gz_extra):
    """Backpropagate upstream gradients at (logits, h, Z, gz) into the params."""
    g = zeros_like_params(params)
    X, U_tok = cache["X"], cache["U_tok"]
    T1, S1, G1, a = cache["T1"], cache["S1"], cache["G1"], cache["a"]
    C_act, t_tok, Z = cache["C_act"], cache["t_tok"], cache["Z"]
    T2, S2, G2, att, h = cache["T2"], cache["S2"], cache["G2"], cache["att"], cache["h"]
    norms, gz = cache["norms"], cache["gz"]

    d_h = np.zeros_like(h)
    if d_logits is not None:
        g.head_w += np.outer(h, d_logits)
        g.head_b += d_logits
        d_h += params.head_w @ d_logits
    if d_h_extra is not None:
        d_h += d_h_extra

    d_Z = np.zeros_like(Z)
    if d_gz_extra is not None:
        # Row-wise L2 normalization, then the linear alignment map.
        dots = np.sum(d_gz_extra * gz, axis=1, keepdims=True)
        d_raw = (d_gz_extra - dots * gz) / norms[:, None]
        g.align_g += Z.T @ d_raw
        d_Z += d_raw @ params.align_g.T
    if d_z_extra is not None:
        d_Z += d_z_extra

    # Slide-level gated-attention pool: h = att @ Z.
    d_Z += att[:, None] * d_h[None, :]
    d_att = Z @ d_h
    d_e2 = att * (d_att - float(np.dot(att, d_att)))
    g.slide_attn.w += G2.T @ d_e2
    d_G2 = np.outer(d_e2, params.slide_attn.w)
    d_A2 = d_G2 * S2 * (1.0 - T2 * T2)
    d_B2 = d_G2 * T2 * S2 * (1.0 - S2)
    g.slide_attn.V += Z.T @ d_A2
    g.slide_attn.U += Z.T @ d_B2
    d_Z += d_A2 @ params.slide_attn.V.T + d_B2 @ params.slide_attn.U.T

    # Region refinement layer.
    d_n = d_Z * (1.0 - Z * Z)
    g.region_mlp_w += t_tok.T @ d_n
    g.region_mlp_b += d_n.sum(axis=0)
    d_t = d_n @ params.region_mlp_w.T

    # Region projection branch.
    d_q = d_t * (1.0 - C_act * C_act)
    g.region_proj_w += cache["R"].T @ d_q
    g.region_proj_b += d_q.sum(axis=0)

    # Patch-level gated-attention pool inside each region: m_i = a_i @ U_tok_i.
    d_m = d_t
    d_U = a[:, :, None] * d_m[:, None, :]
    d_a = np.einsum("rjd,rd->rj", U_tok, d_m)
    d_e1 = a * (d_a - np.sum(a * d_a, axis=1, keepdims=True))
    g.patch_attn.w += np.einsum("rja,rj->a", G1, d_e1)
    d_G1 = d_e1[:, :, None] * params.patch_attn.w[None, None, :]
    d_A1 = d_G1 * S1 * (1.0 - T1 * T1)
    d_B1 = d_G1 * T1 * S1 * (1.0 - S1)
    g.patch_attn.V += np.einsum("rjd,rja->da", U_tok, d_A1)
    g.patch_attn.U += np.einsum("rjd,rja->da", U_tok, d_B1)
    d_U += d_A1 @ params.patch_attn.V.T + d_B1 @ params.patch_attn.U.T

    d_P = d_U * (1.0 - U_tok * U_tok)
    g.patch_proj_w += np.einsum("rjv,rjd->vd", X, d_P)
    g.patch_proj_b += d_P.sum(axis=(0, 1))
    return g


def _one_hot(n: int, index: int) -> np.ndarray:
    v = np.zeros(n)
    v[index] = 1.0
    return v


def _resolve_trace(params, trace, s):
    if trace is None or not trace.cache:
        return forward(params, s)
    if trace.logits.shape[0] != params.head_w.shape[1]:
        raise DimensionError("trace does not match the model's head width")
    return trace


def backward(params: ModelParams, trace: ForwardTrace, s: SlideFeatures,
             weights: LossWeights, targets: StepTargets) -> ModelParams:
    """Exact gradient of the weighted per-slide objective w.r.t. every param.

    The objective: ce_weight * CE(current) + alpha * contrastive
    + beta * self-similarity + gamma * mean replay CE
    + lambda_ppgd * mean gradient-distillation penalty. Terms with zero
    weight are skipped entirely, so their inputs may be absent.
    """
    trace = _resolve_trace(params, trace, s)
    c = trace.cache
    n_cls = trace.probs.shape[0]

    d_logits = None
    if weights.ce_weight > 0:
        if not 0 <= targets.target < n_cls:
            raise IndexError(f"target {targets.target} out of range")
        d_logits = weights.ce_weight * (trace.probs - _one_hot(n_cls, targets.target))

    d_gz = None
    d_z = None
    if weights.alpha > 0:
        if targets.prototypes is None:
            raise ConfigurationError("alpha > 0 requires a prototype buffer")
        _, g_nce = infonce_gradient(trace.aligned_gz, targets.prototypes,
                                    targets.target, weights)
        d_gz = weights.alpha * g_nce
    if weights.beta > 0:
        _, g_z, g_gz = self_similarity_gradients(trace.region_features_z,
                                                 trace.aligned_gz)
        d_z = weights.beta * g_z
        d_gz = weights.beta * g_gz if d_gz is None else d_gz + weights.beta * g_gz

    grads = _backprop_slide(params, s, c, d_logits, None, d_z, d_gz)

    replays = targets.replay or ()
    for r in replays:
        r_trace = _resolve_trace(params, r.trace, r.slide)
        scale = 1.0 / len(replays)
        d_logits_r = None
        if weights.gamma > 0:
            d_logits_r = weights.gamma * scale * (
                r_trace.probs - _one_hot(n_cls, r.target))
        d_h_r = None
        if weights.lambda_ppgd > 0:
            _, g_h = ppgd_gradient(r.stored_grad, r_trace.slide_embedding, weights)
            d_h_r = weights.lambda_ppgd * scale * g_h
        if d_logits_r is not None or d_h_r is not None:
            add_params_(grads, _backprop_slide(
                params, r.slide, r_trace.cache, d_logits_r, d_h_r, None, None))
    return grads


def total_loss(params: ModelParams, s: SlideFeatures, weights: LossWeights,
               targets: StepTargets) -> float:
    """Scalar objective matching ``backward`` term for term.

    Runs its own forward passes, so finite-difference checks of ``backward``
    can perturb ``params`` freely.
    """
    trace = forward(params, s)
    value = 0.0
    if weights.ce_weight > 0:
        value += weights.ce_weight * cross_entropy(trace.probs, targets.target)
    if weights.alpha > 0:
        if targets.prototypes is None:
            raise ConfigurationError("alpha > 0 requires a prototype buffer")
        value += weights.alpha * infonce(trace.aligned_gz, targets.prototypes,
                                         targets.target, weights)
    if weights.beta > 0:
        value += weights.beta * self_similarity(trace.region_features_z,
                                                trace.aligned_gz)
    replays = targets.replay or ()
    for r in replays:
        r_trace = forward(params, r.slide)
        scale = 1.0 / len(replays)
        if weights.gamma > 0:
            value += weights.gamma * scale * cross_entropy(r_trace.probs, r.target)
        if weights.lambda_ppgd > 0:
            value += weights.lambda_ppgd * scale * ppgd(
                r.stored_grad, r_trace.slide_embedding, weights)
    return float(value)
