"""
One-stream tracking network.

template + search clouds
  -> GCN local encoding (shared weights)
  -> template-aware transformer layers over the concatenated point set
  -> multi-scale aggregation of the per-layer search features
  -> per-point segmentation scores, feature augmentation [s; p; F]
  -> BEV max-pooling and a conv head producing heatmap / offset+yaw / z maps
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from point_ops import BevGrid, PointCloud, ball_query, farthest_point_sample, feature_propagation, voxelize_bev
from tensor_core import (GradReport, Tensor, concat, conv2d, grad_check, index_rows, layer_norm, linear,
                         load_checkpoint, matmul, reduce_max, reduce_sum, relu, reshape, save_checkpoint,
                         scale, sigmoid, softmax, transpose)

logger = logging.getLogger(__name__)

HEATMAP_PRIOR = 0.1
HEATMAP_BIAS = -math.log((1.0 - HEATMAP_PRIOR) / HEATMAP_PRIOR)


class ModelError(ValueError):
    pass


class ModelConfigError(ModelError):
    pass


@dataclass
class ModelConfig:
    n_template: int = 512
    n_search: int = 1024
    feat_dim: int = 64
    ttm_layers: int = 3
    heads: int = 4
    gcn_radius: float = 0.3
    gcn_layers: int = 2
    gcn_neighbors: int = 16
    mfa_samples: tuple = (256, 512)
    mfa_direction: str = "specific"
    ffn_mult: int = 2
    head_channels: int = 64
    use_mfa: bool = True
    use_segmentation: bool = True
    bev_grid: BevGrid = field(default_factory=BevGrid)

    def __post_init__(self):
        self.mfa_samples = tuple(int(s) for s in self.mfa_samples)
        if isinstance(self.bev_grid, dict):
            self.bev_grid = BevGrid(**self.bev_grid)
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.feat_dim // self.heads

    @property
    def augmented_dim(self) -> int:
        return (1 if self.use_segmentation else 0) + 3 + self.feat_dim

    def validate(self) -> None:
        if self.feat_dim % self.heads:
            raise ModelConfigError(f"feat_dim {self.feat_dim} is not divisible by {self.heads} heads")
        if self.ttm_layers < 1:
            raise ModelConfigError("at least one transformer layer is required")
        if len(self.mfa_samples) != self.ttm_layers - 1:
            raise ModelConfigError(
                f"mfa_samples needs {self.ttm_layers - 1} counts for {self.ttm_layers} layers, got {self.mfa_samples}")
        samples = list(self.mfa_samples) + [self.n_search]
        if any(b <= a for a, b in zip(samples, samples[1:])) or (samples and samples[0] < 1):
            raise ModelConfigError(f"mfa_samples {self.mfa_samples} must increase strictly below n_search")
        if self.mfa_direction not in ("specific", "usual"):
            raise ModelConfigError(f"unknown mfa_direction '{self.mfa_direction}'")
        if min(self.n_search, self.gcn_layers, self.gcn_neighbors, self.head_channels) < 1 or self.n_template < 0:
            raise ModelConfigError("point counts, layer counts and widths must be positive")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        values = dict(n_template=16, n_search=32, feat_dim=8, mfa_samples=(8, 16), gcn_neighbors=8,
                      head_channels=8, bev_grid=BevGrid.desk())
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mfa_samples"] = list(self.mfa_samples)
        out["bev_grid"] = self.bev_grid.to_dict()
        return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _linear_shapes(prefix: str, d_in: int, d_out: int) -> dict:
    return {f"{prefix}.weight": (d_in, d_out), f"{prefix}.bias": (d_out,)}


def _conv_shapes(prefix: str, c_in: int, c_out: int, k: int) -> dict:
    return {f"{prefix}.weight": (c_out, c_in, k, k), f"{prefix}.bias": (c_out,)}


def parameter_shapes(config: ModelConfig) -> dict:
    """Ordered name -> shape for every learned tensor."""
    d, shapes = config.feat_dim, {}
    for l in range(config.gcn_layers):
        shapes.update(_linear_shapes(f"gcn.{l}.message", (0 if l == 0 else d) + 3, d))
        shapes.update(_linear_shapes(f"gcn.{l}.update", d, d))
    for i in range(config.ttm_layers):
        p = f"ttm.{i}"
        shapes.update(_linear_shapes(f"{p}.pos_embed.0", 3, d))
        shapes.update(_linear_shapes(f"{p}.pos_embed.1", d, d))
        for proj in ("query", "key", "value", "output"):
            shapes.update(_linear_shapes(f"{p}.{proj}", d, d))
        del shapes[f"{p}.key.bias"]  # shifts every logit of a softmax row equally
        for norm in ("norm1", "norm2"):
            shapes[f"{p}.{norm}.gain"] = (d,)
            shapes[f"{p}.{norm}.bias"] = (d,)
        shapes.update(_linear_shapes(f"{p}.ffn.0", d, config.ffn_mult * d))
        shapes.update(_linear_shapes(f"{p}.ffn.1", config.ffn_mult * d, d))
    if config.use_mfa:
        for j in range(config.ttm_layers - 1):
            shapes.update(_linear_shapes(f"mfa.{j}", 2 * d, d))
    if config.use_segmentation:
        shapes.update(_linear_shapes("seg.0", d, d))
        shapes.update(_linear_shapes("seg.1", d, 1))
    c_in = config.augmented_dim
    for c in range(3):
        shapes.update(_conv_shapes(f"head.trunk.{c}", c_in, config.head_channels, 3))
        c_in = config.head_channels
    shapes.update(_conv_shapes("head.heatmap", c_in, 1, 1))
    shapes.update(_conv_shapes("head.offset", c_in, 3, 1))
    shapes.update(_conv_shapes("head.zaxis", c_in, 1, 1))
    return shapes


class ModelParams:
    """Ordered mapping of parameter name to Tensor."""

    def __init__(self, tensors: dict, config: ModelConfig):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ModelConfigError(f"parameter names do not match config (missing={missing[:3]}, extra={extra[:3]})")
        for name, tensor in tensors.items():
            if tensor.shape != tuple(expected[name]):
                raise ModelConfigError(f"{name}: shape {tensor.shape} != {tuple(expected[name])}")
            if not np.all(np.isfinite(tensor.data)):
                raise ModelConfigError(f"{name}: non-finite values")
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def num_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def clone(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()},
                           self.config)

    @classmethod
    def from_arrays(cls, arrays: dict, config: ModelConfig) -> "ModelParams":
        names = list(parameter_shapes(config))
        missing = [n for n in names if n not in arrays]
        if missing:
            raise ModelConfigError(f"checkpoint lacks parameters: {missing[:3]}")
        return cls({n: Tensor(np.array(arrays[n]), requires_grad=True) for n in names}, config)

    def save(self, directory: str, extra_arrays: dict | None = None, meta: dict | None = None) -> str:
        payload = self.arrays()
        payload.update(extra_arrays or {})
        meta = dict(meta or {})
        meta["model_config"] = self.config.to_dict()
        meta["param_names"] = list(self.tensors)
        return save_checkpoint(directory, payload, meta)

    @classmethod
    def load(cls, directory: str, config: ModelConfig | None = None) -> tuple:
        """Return (params, remaining arrays, meta)."""
        arrays, meta = load_checkpoint(directory)
        if config is None:
            config = ModelConfig(**meta["model_config"])
        params = cls.from_arrays(arrays, config)
        rest = {k: v for k, v in arrays.items() if k not in params.tensors}
        return params, rest, meta


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """He-normal weights, zero biases, unit norm gains, heatmap bias at the 0.1 prior."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name == "head.heatmap.bias":
            value = np.full(shape, HEATMAP_BIAS)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            value = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        tensors[name] = Tensor(value, requires_grad=True)
    return ModelParams(tensors, config)


def _lin(x, params: ModelParams, prefix: str) -> Tensor:
    return linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

@dataclass
class AttentionDecomposition:
    """Joint attention of one layer split into template/search blocks, per head."""
    w_tt: np.ndarray   # [H, N_t, N_t]
    w_ts: np.ndarray   # [H, N_t, N_s]
    w_st: np.ndarray   # [H, N_s, N_t]
    w_ss: np.ndarray   # [H, N_s, N_s]
    v_t: np.ndarray    # [H, N_t, d]
    v_s: np.ndarray    # [H, N_s, d]
    output: np.ndarray  # [H, N_t + N_s, d], monolithic attention @ V

    def recompose(self) -> np.ndarray:
        template_rows = self.w_tt @ self.v_t + self.w_ts @ self.v_s
        search_rows = self.w_st @ self.v_t + self.w_ss @ self.v_s
        return np.concatenate([template_rows, search_rows], axis=1)

    def row_sums(self) -> tuple:
        return (self.w_tt.sum(-1) + self.w_ts.sum(-1), self.w_st.sum(-1) + self.w_ss.sum(-1))


@dataclass
class LayerOutput:
    coords: np.ndarray
    feats: Tensor


@dataclass
class HeadOutputs:
    heatmap: Tensor           # [ny, nx]
    offset_rot: Tensor        # [3, ny, nx]
    zmap: Tensor              # [ny, nx]
    seg_scores: Tensor | None = None   # [N_s]
    occupancy: np.ndarray | None = None  # [ny, nx] bool


@dataclass
class ForwardResult:
    head: HeadOutputs
    seg_scores: Tensor | None
    diagnostics: list
    search_coords: np.ndarray


def local_encode(cloud: PointCloud, params: ModelParams, config: ModelConfig) -> Tensor:
    """Stacked point-graph convolutions over fixed-radius neighbourhoods."""
    n = len(cloud)
    if n == 0:
        raise ModelError("cannot encode an empty cloud")
    neighbors = ball_query(cloud, cloud, config.gcn_radius, config.gcn_neighbors).indices
    k = neighbors.shape[1]
    relative = Tensor(cloud.coords[neighbors] - cloud.coords[:, None, :])
    feats = None
    for l in range(config.gcn_layers):
        if feats is None:
            message_in = relative
        else:
            picked = reshape(index_rows(feats, neighbors.reshape(-1)), (n, k, config.feat_dim))
            message_in = concat([picked, relative], axis=2)
        messages = _lin(message_in, params, f"gcn.{l}.message")
        feats = relu(_lin(reduce_max(messages, axis=1), params, f"gcn.{l}.update"))
    return feats


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def ttm_forward(coords: np.ndarray, feats: Tensor, params: ModelParams, config: ModelConfig, layer: int,
                n_template: int, cross_attention: bool = True, collect: bool = False) -> tuple:
    """One template-aware transformer layer over the joint [template; search] set.

    With cross_attention=False the template and search blocks are masked out
    of each other's softmax, so each part only attends to itself.
    """
    n = feats.shape[0]
    if coords.shape[0] != n or feats.shape[1] != config.feat_dim:
        raise ModelError(f"layer {layer}: {coords.shape[0]} coords for features {feats.shape}")
    p = f"ttm.{layer}"
    pos = _lin(relu(_lin(coords, params, f"{p}.pos_embed.0")), params, f"{p}.pos_embed.1")
    x = feats + pos

    q = _split_heads(_lin(x, params, f"{p}.query"), config.heads)
    k = _split_heads(linear(x, params[f"{p}.key.weight"]), config.heads)
    v = _split_heads(_lin(x, params, f"{p}.value"), config.heads)
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(config.head_dim))
    mask = None
    if not cross_attention:
        is_template = np.arange(n) < n_template
        mask = is_template[:, None] == is_template[None, :]
    attn = softmax(scores, axis=-1, mask=mask)
    attended = matmul(attn, v)
    merged = reshape(transpose(attended, (1, 0, 2)), (n, config.feat_dim))

    h = layer_norm(x + _lin(merged, params, f"{p}.output"), params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"])
    ffn = _lin(relu(_lin(h, params, f"{p}.ffn.0")), params, f"{p}.ffn.1")
    out = layer_norm(h + ffn, params[f"{p}.norm2.gain"], params[f"{p}.norm2.bias"])

    decomposition = None
    if collect:
        a, vals, t = attn.data, v.data, n_template
        decomposition = AttentionDecomposition(
            w_tt=a[:, :t, :t].copy(), w_ts=a[:, :t, t:].copy(), w_st=a[:, t:, :t].copy(), w_ss=a[:, t:, t:].copy(),
            v_t=vals[:, :t].copy(), v_s=vals[:, t:].copy(), output=attended.data.copy())
    return out, decomposition


def one_stream_forward(template: PointCloud, search: PointCloud, params: ModelParams, config: ModelConfig,
                       cross_attention: bool = True, collect: bool = False, fps_start: int = 0) -> tuple:
    """Run the transformer stack on [template; search]; return per-layer search outputs and diagnostics.

    Every layer sees all points. After layer i < last, the search part is
    read out at the first mfa_samples[i] farthest-point samples; the last
    layer keeps every search point in input order.
    """
    n_t = len(template)
    search_feats = local_encode(search, params, config)
    if n_t:
        coords = np.vstack([template.coords, search.coords])
        feats = concat([local_encode(template, params, config), search_feats], axis=0)
    else:
        coords, feats = search.coords, search_feats

    sampled = farthest_point_sample(search, max(config.mfa_samples, default=0), start=fps_start)
    outputs, diagnostics = [], []
    search_rows = np.arange(n_t, n_t + len(search))
    for i in range(config.ttm_layers):
        feats, decomposition = ttm_forward(coords, feats, params, config, i, n_t, cross_attention, collect)
        if decomposition is not None:
            diagnostics.append(decomposition)
        if i < config.ttm_layers - 1:
            picked = sampled[:config.mfa_samples[i]]
            outputs.append(LayerOutput(search.coords[picked], index_rows(feats, search_rows[picked])))
        else:
            outputs.append(LayerOutput(search.coords, index_rows(feats, search_rows)))
    return outputs, diagnostics


def _combine(propagated: Tensor, feats: Tensor, params: ModelParams, stage: int) -> Tensor:
    return relu(_lin(concat([propagated, feats], axis=1), params, f"mfa.{stage}"))


def mfa_forward(outputs: list, params: ModelParams, config: ModelConfig, direction: str | None = None) -> Tensor:
    """Fuse per-layer search features onto the full search set.

    specific: shallow (sparse) layers flow into deeper (denser) ones.
    usual: deep layers flow back into shallow ones, then onto the full set.
    """
    direction = direction or config.mfa_direction
    if len(outputs) != config.ttm_layers:
        raise ModelError(f"expected {config.ttm_layers} layer outputs, got {len(outputs)}")
    if not config.use_mfa or len(outputs) == 1:
        return outputs[-1].feats

    if direction == "specific":
        acc = outputs[0]
        for j in range(1, len(outputs)):
            target = outputs[j]
            propagated = feature_propagation(PointCloud(acc.coords, acc.feats), target.coords)
            acc = LayerOutput(target.coords, _combine(propagated, target.feats, params, j - 1))
        return acc.feats
    if direction == "usual":
        acc = outputs[-1]
        for stage, j in enumerate(range(len(outputs) - 2, -1, -1)):
            target = outputs[j]
            propagated = feature_propagation(PointCloud(acc.coords, acc.feats), target.coords)
            acc = LayerOutput(target.coords, _combine(propagated, target.feats, params, stage))
        return feature_propagation(PointCloud(acc.coords, acc.feats), outputs[-1].coords)
    raise ModelConfigError(f"unknown mfa direction '{direction}'")


def segment_scores(feats: Tensor, params: ModelParams) -> Tensor:
    hidden = relu(_lin(feats, params, "seg.0"))
    return reshape(sigmoid(_lin(hidden, params, "seg.1")), (feats.shape[0],))


def augment_features(scores: Tensor | None, coords: np.ndarray, feats: Tensor) -> Tensor:
    """Row-wise [s; p; F], or [p; F] when no scores are given."""
    n = feats.shape[0]
    if coords.shape[0] != n or (scores is not None and scores.shape[0] != n):
        raise ModelError("scores, coordinates and features must have the same row count")
    parts = [Tensor(coords), feats]
    if scores is not None:
        parts.insert(0, reshape(scores, (n, 1)))
    return concat(parts, axis=1)


def bev_head_forward(bev: Tensor, params: ModelParams, config: ModelConfig) -> HeadOutputs:
    grid = config.bev_grid
    if bev.shape != (config.augmented_dim, grid.ny, grid.nx):
        raise ModelError(f"BEV map {bev.shape} != {(config.augmented_dim, grid.ny, grid.nx)}")
    h = bev
    for c in range(3):
        h = relu(conv2d(h, params[f"head.trunk.{c}.weight"], params[f"head.trunk.{c}.bias"], 1, 1))
    heat = sigmoid(conv2d(h, params["head.heatmap.weight"], params["head.heatmap.bias"]))
    offset = conv2d(h, params["head.offset.weight"], params["head.offset.bias"])
    zmap = conv2d(h, params["head.zaxis.weight"], params["head.zaxis.bias"])
    return HeadOutputs(reshape(heat, (grid.ny, grid.nx)), offset, reshape(zmap, (grid.ny, grid.nx)))


def model_forward(template: PointCloud, search: PointCloud, params: ModelParams, config: ModelConfig,
                  cross_attention: bool = True, collect_diagnostics: bool = False,
                  fps_start: int = 0) -> ForwardResult:
    if len(search) != config.n_search or len(template) not in (0, config.n_template):
        raise ModelError(f"expected {config.n_template}/{config.n_search} template/search points, "
                         f"got {len(template)}/{len(search)}")
    outputs, diagnostics = one_stream_forward(template, search, params, config, cross_attention,
                                              collect_diagnostics, fps_start)
    fused = mfa_forward(outputs, params, config)
    scores = segment_scores(fused, params) if config.use_segmentation else None
    augmented = augment_features(scores, search.coords, fused)
    bev, occupancy = voxelize_bev(PointCloud(search.coords, augmented), config.bev_grid)
    head = bev_head_forward(bev, params, config)
    head.seg_scores = scores
    head.occupancy = occupancy
    return ForwardResult(head, scores, diagnostics, search.coords)


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------

def random_clouds(config: ModelConfig, rng: np.random.Generator) -> tuple:
    """Template and search clouds filling the BEV grid, for checks on random data."""
    grid = config.bev_grid
    extent = 0.9 * min(grid.x_range[1], grid.y_range[1])
    template = PointCloud(rng.uniform(-0.5, 0.5, size=(config.n_template, 3)))
    search = PointCloud(np.column_stack([rng.uniform(-extent, extent, size=(config.n_search, 2)),
                                         rng.uniform(-0.5, 0.5, size=config.n_search)]))
    return template, search


def model_gradcheck(config: ModelConfig | None = None, seed: int = 0, tol: float = 1e-3,
                    entries_per_tensor: int = 3) -> list:
    """Central-difference check of a random linear functional of every model output.

    Each parameter tensor is checked at its largest-gradient entries. Biases
    are jittered away from zero so ReLU inputs sit off their kink.
    """
    config = config or ModelConfig.desk()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    template, search = random_clouds(config, rng)
    grid = config.bev_grid
    w_heat = rng.normal(size=(grid.ny, grid.nx))
    w_off = rng.normal(size=(3, grid.ny, grid.nx))
    w_z = rng.normal(size=(grid.ny, grid.nx))
    w_seg = rng.normal(size=config.n_search)
    for name, tensor in params.items():
        if name.endswith(".bias"):
            tensor.data = tensor.data + rng.normal(scale=0.1, size=tensor.shape)

    def objective(_) -> Tensor:
        result = model_forward(template, search, params, config)
        total = (reduce_sum(result.head.heatmap * w_heat) + reduce_sum(result.head.offset_rot * w_off)
                 + reduce_sum(result.head.zmap * w_z))
        if result.seg_scores is not None:
            total = total + reduce_sum(result.seg_scores * w_seg)
        return total

    params.zero_grad()
    objective(None).backward()
    reports = []
    for name, tensor in params.items():
        ranked = np.argsort(-np.abs(tensor.grad.reshape(-1)), kind="stable")[:entries_per_tensor]
        params.zero_grad()
        reports.append(grad_check(objective, tensor, eps=1e-5, tol=tol, op_name=f"model:{name}",
                                  indices=ranked.tolist(), abs_floor=1e-8))
    return reports
