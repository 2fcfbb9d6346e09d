"""Trainable quality oracle: multi-resolution hash encoding plus a compact MLP
fitted to a 2-D reference image.

The model maps coordinates in the unit square to pixel colors. Quality of any
bit-width policy is measured as the PSNR of the quantized model's rendering
against the reference image, optionally after fake-quantized fine-tuning. The
same model also emits the table-access trace that drives the accelerator
timing model.

All math is float64 numpy with explicit backprop; training is a pure function
of (inputs, seed).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .images import RenderTarget
from .nets import Adam
from .policy import QuantPolicy
from .quantizer import (
    calibrate_range,
    fake_quantize,
    make_activation_params,
    make_weight_params,
    ste_mask,
)
from .trace import AccessTrace

HASH_PRIME_X = 1
HASH_PRIME_Y = 2654435761

CHECKPOINT_MAGIC = b"HNGP"
CHECKPOINT_VERSION = 1

CALIBRATION_SAMPLES = 1024
CALIBRATION_SEED = 12345

PSNR_CAP_DB = 100.0

# Corner visit order within a cell: row-major over (dx, dy).
_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


class TrainingError(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


@dataclass(frozen=True)
class NgpConfig:
    num_levels: int = 12
    features_per_level: int = 2
    table_size_log2: int = 14
    base_resolution: int = 16
    growth_factor: float = 1.5
    mlp_hidden_layers: int = 2
    mlp_width: int = 64
    output_channels: int = 3

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.features_per_level < 1 or self.table_size_log2 < 1:
            raise ValueError("invalid table geometry")
        if self.growth_factor < 1.0:
            raise ValueError("growth_factor below 1 would shrink resolutions")
        res = [self.level_resolution(l) for l in range(self.num_levels)]
        if any(b < a for a, b in zip(res, res[1:])):
            raise ValueError("per-level resolutions must be nondecreasing")

    def level_resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.growth_factor**level))

    def level_is_dense(self, level: int) -> bool:
        side = self.level_resolution(level) + 1
        return side * side <= 2**self.table_size_log2

    def level_rows(self, level: int) -> int:
        """Allocated table entries for a level: the dense vertex count when it
        fits, otherwise the full hash table."""
        side = self.level_resolution(level) + 1
        return min(side * side, 2**self.table_size_log2)

    @property
    def num_mlp_layers(self) -> int:
        return self.mlp_hidden_layers + 1

    @property
    def encoding_dim(self) -> int:
        return self.num_levels * self.features_per_level

    def mlp_layer_dims(self) -> list:
        dims = [self.encoding_dim] + [self.mlp_width] * self.mlp_hidden_layers + [self.output_channels]
        return list(zip(dims[:-1], dims[1:]))


class ToyNgpModel:
    """Per-level feature tables plus MLP weights/biases."""

    def __init__(self, config: NgpConfig, tables, weights, biases):
        self.config = config
        self.tables = tables
        self.weights = weights
        self.biases = biases
        self._validate()

    def _validate(self):
        cfg = self.config
        if len(self.tables) != cfg.num_levels:
            raise ValueError("table count does not match config")
        for l, t in enumerate(self.tables):
            if t.shape != (cfg.level_rows(l), cfg.features_per_level):
                raise ValueError(f"level {l} table shape {t.shape} mismatches config")
        dims = cfg.mlp_layer_dims()
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise ValueError("MLP layer count does not match config")
        for (d_in, d_out), w, b in zip(dims, self.weights, self.biases):
            if w.shape != (d_in, d_out) or b.shape != (d_out,):
                raise ValueError("MLP parameter shape mismatches config")
        for arr in self.tables + self.weights + self.biases:
            if not np.all(np.isfinite(arr)):
                raise ValueError("model parameters must be finite")

    @classmethod
    def init(cls, config: NgpConfig, seed: int) -> "ToyNgpModel":
        rng = np.random.default_rng(seed)
        tables = [rng.uniform(-1e-4, 1e-4, size=(config.level_rows(l), config.features_per_level))
                  for l in range(config.num_levels)]
        weights, biases = [], []
        for d_in, d_out in config.mlp_layer_dims():
            weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(config, tables, weights, biases)

    def copy(self) -> "ToyNgpModel":
        return ToyNgpModel(
            self.config,
            [t.copy() for t in self.tables],
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def parameter_arrays(self) -> list:
        """Checkpoint declaration order: tables coarse to fine, then W, b per layer."""
        out = list(self.tables)
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def hash_index(grid_coord, level: int, config: NgpConfig) -> int:
    """Table index of one grid vertex.

    Small levels whose dense grid fits in the table index row-major
    (collision free); larger levels use the prime-XOR spatial hash.
    """
    if not 0 <= level < config.num_levels:
        raise ValueError(f"level {level} out of range [0, {config.num_levels})")
    x, y = int(grid_coord[0]), int(grid_coord[1])
    if config.level_is_dense(level):
        return y * (config.level_resolution(level) + 1) + x
    return ((x * HASH_PRIME_X) ^ (y * HASH_PRIME_Y)) % (2**config.table_size_log2)


def _corner_indices(xy: np.ndarray, level: int, config: NgpConfig):
    """Cell corner table indices and bilinear weights for a coordinate batch.

    Returns (indices (B, 4) int64, weights (B, 4) float64), corners in
    row-major (dx, dy) order.
    """
    res = config.level_resolution(level)
    scaled = xy * res
    cell = np.minimum(np.floor(scaled), res - 1).astype(np.int64)
    cell = np.maximum(cell, 0)
    frac = scaled - cell
    fx, fy = frac[:, 0], frac[:, 1]
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    idx = np.empty((xy.shape[0], 4), dtype=np.int64)
    dense = config.level_is_dense(level)
    stride = res + 1
    mask = 2**config.table_size_log2 - 1
    for c, (dx, dy) in enumerate(_CORNERS):
        cx = cell[:, 0] + dx
        cy = cell[:, 1] + dy
        if dense:
            idx[:, c] = cy * stride + cx
        else:
            idx[:, c] = ((cx * HASH_PRIME_X) ^ (cy * HASH_PRIME_Y)) & mask
    return idx, wts


def _as_batch(x) -> tuple:
    xy = np.asarray(x, dtype=np.float64)
    squeeze = xy.ndim == 1
    if squeeze:
        xy = xy[None, :]
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ValueError("coordinates must be shape (2,) or (B, 2)")
    if xy.size and (xy.min() < 0.0 or xy.max() > 1.0):
        raise ValueError("coordinates must lie in the unit square")
    return xy, squeeze


def encode(x, model: ToyNgpModel) -> np.ndarray:
    """Concatenated per-level bilinear feature interpolation, coarse to fine."""
    xy, squeeze = _as_batch(x)
    cfg = model.config
    feats = np.empty((xy.shape[0], cfg.encoding_dim))
    f = cfg.features_per_level
    for l in range(cfg.num_levels):
        idx, wts = _corner_indices(xy, l, cfg)
        gathered = model.tables[l][idx]  # (B, 4, F)
        feats[:, l * f:(l + 1) * f] = np.einsum("bc,bcf->bf", wts, gathered)
    return feats[0] if squeeze else feats


@dataclass
class PolicyQuantizers:
    """Frozen quantization parameters realizing one policy on one model."""

    feature_params: list  # per hash level, symmetric
    weight_params: list   # per MLP layer, symmetric
    act_params: list      # per MLP layer input, asymmetric


def prepare_quantizers(model: ToyNgpModel, policy: QuantPolicy,
                       percentile: float = 1.0,
                       sample_count: int = CALIBRATION_SAMPLES,
                       seed: int = CALIBRATION_SEED) -> PolicyQuantizers:
    """Calibrate quantization parameters for a policy on the current model.

    Hash features and weights take per-tensor min/max ranges; activation
    ranges come from a fixed-seed batch of forward samples (percentile
    optionally clips activation tails).
    """
    cfg = model.config
    if len(policy.hash_bits) != cfg.num_levels or len(policy.mlp_bits) != cfg.num_mlp_layers:
        raise ValueError("policy does not cover every quantizable unit")
    feature_params = [
        make_weight_params(calibrate_range(model.tables[l].ravel()), policy.hash_bits[l])
        for l in range(cfg.num_levels)
    ]
    weight_params = [
        make_weight_params(calibrate_range(w.ravel()), policy.mlp_bits[i][0])
        for i, w in enumerate(model.weights)
    ]
    rng = np.random.default_rng(seed)
    coords = rng.random((sample_count, 2))
    _, cache = _forward_full(model, coords, None, need_cache=True)
    act_params = [
        make_activation_params(calibrate_range(cache["layer_inputs"][i].ravel(), percentile),
                               policy.mlp_bits[i][1])
        for i in range(cfg.num_mlp_layers)
    ]
    return PolicyQuantizers(feature_params, weight_params, act_params)


def describe_quantizers(model: ToyNgpModel, policy: QuantPolicy,
                        quantizers: PolicyQuantizers | None = None) -> dict:
    """Calibrated quantization parameters of a policy as plain report fields."""
    if quantizers is None:
        quantizers = prepare_quantizers(model, policy)
    return {
        "hash_features": [p.to_dict() for p in quantizers.feature_params],
        "mlp_weights": [p.to_dict() for p in quantizers.weight_params],
        "mlp_activations": [p.to_dict() for p in quantizers.act_params],
    }


def _forward_full(model: ToyNgpModel, xy: np.ndarray, quantizers, need_cache: bool = False):
    """Forward pass, optionally fake-quantized, optionally caching for backprop."""
    cfg = model.config
    f = cfg.features_per_level
    batch = xy.shape[0]
    feats = np.empty((batch, cfg.encoding_dim))
    level_cache = []
    feat_masks = []
    for l in range(cfg.num_levels):
        idx, wts = _corner_indices(xy, l, cfg)
        gathered = model.tables[l][idx]
        feat = np.einsum("bc,bcf->bf", wts, gathered)
        if quantizers is not None:
            qp = quantizers.feature_params[l]
            mask = ste_mask(qp, feat)
            feat = fake_quantize(qp, feat)
            if need_cache:
                feat_masks.append(mask)
        elif need_cache:
            feat_masks.append(None)
        feats[:, l * f:(l + 1) * f] = feat
        if need_cache:
            level_cache.append((idx, wts))

    h = feats
    layer_inputs = []
    layer_inputs_q = []
    act_masks = []
    q_weights = []
    w_masks = []
    post_acts = []
    n_layers = cfg.num_mlp_layers
    for i in range(n_layers):
        if need_cache:
            layer_inputs.append(h)
        if quantizers is not None:
            aq = quantizers.act_params[i]
            a_mask = ste_mask(aq, h)
            a_in = fake_quantize(aq, h)
            wq_params = quantizers.weight_params[i]
            w_mask = ste_mask(wq_params, model.weights[i])
            w_used = fake_quantize(wq_params, model.weights[i])
        else:
            a_mask = None
            a_in = h
            w_mask = None
            w_used = model.weights[i]
        z = a_in @ w_used + model.biases[i]
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
        else:
            h = 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))
        if need_cache:
            layer_inputs_q.append(a_in)
            act_masks.append(a_mask)
            q_weights.append(w_used)
            w_masks.append(w_mask)
            post_acts.append(h)
    if not need_cache:
        return h, None
    cache = {
        "level_cache": level_cache,
        "feat_masks": feat_masks,
        "layer_inputs": layer_inputs,
        "layer_inputs_q": layer_inputs_q,
        "act_masks": act_masks,
        "q_weights": q_weights,
        "w_masks": w_masks,
        "post_acts": post_acts,
    }
    return h, cache


def forward(x, model: ToyNgpModel, policy: QuantPolicy | None = None,
            quantizers: PolicyQuantizers | None = None) -> np.ndarray:
    """Model output in [0, 1] for coordinates in the unit square.

    With a policy, hash features, layer inputs, and weights pass through
    fake quantization at the policy's bit widths; quantizers may be passed
    to reuse an existing calibration.
    """
    xy, squeeze = _as_batch(x)
    if policy is not None and quantizers is None:
        quantizers = prepare_quantizers(model, policy)
    y, _ = _forward_full(model, xy, quantizers)
    return y[0] if squeeze else y


def loss_and_grads(model: ToyNgpModel, xy: np.ndarray, targets: np.ndarray,
                   quantizers: PolicyQuantizers | None = None):
    """Mean squared error and its gradients w.r.t. all model parameters.

    Returns (loss, table_grads, weight_grads, bias_grads). Quantized paths
    use the straight-through estimator for every fake-quantize site.
    """
    cfg = model.config
    y, cache = _forward_full(model, xy, quantizers, need_cache=True)
    diff = y - targets
    loss = float(np.mean(diff * diff))
    dy = (2.0 / diff.size) * diff

    n_layers = cfg.num_mlp_layers
    weight_grads = [None] * n_layers
    bias_grads = [None] * n_layers
    dh = dy
    for i in range(n_layers - 1, -1, -1):
        post = cache["post_acts"][i]
        if i < n_layers - 1:
            dz = dh * (post > 0)
        else:
            dz = dh * post * (1.0 - post)
        wg = cache["layer_inputs_q"][i].T @ dz
        if cache["w_masks"][i] is not None:
            wg *= cache["w_masks"][i]
        weight_grads[i] = wg
        bias_grads[i] = dz.sum(axis=0)
        dh = dz @ cache["q_weights"][i].T
        if cache["act_masks"][i] is not None:
            dh = dh * cache["act_masks"][i]

    f = cfg.features_per_level
    table_grads = []
    for l in range(cfg.num_levels):
        dfeat = dh[:, l * f:(l + 1) * f]
        if cache["feat_masks"][l] is not None:
            dfeat = dfeat * cache["feat_masks"][l]
        idx, wts = cache["level_cache"][l]
        rows = cfg.level_rows(l)
        grad = np.empty((rows, f))
        flat_idx = idx.ravel()
        for c in range(f):
            contrib = (wts * dfeat[:, c:c + 1]).ravel()
            grad[:, c] = np.bincount(flat_idx, weights=contrib, minlength=rows)
        table_grads.append(grad)
    return loss, table_grads, weight_grads, bias_grads


def _pixel_center_coords(width: int, height: int) -> np.ndarray:
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _fit(model: ToyNgpModel, image: RenderTarget, steps: int, rng: np.random.Generator,
         quantizers: PolicyQuantizers | None, batch_size: int,
         lr_tables: float, lr_mlp: float, callback=None, log_every: int = 100) -> ToyNgpModel:
    cfg = model.config
    coords = _pixel_center_coords(image.width, image.height)
    targets = image.pixels.reshape(-1, image.channels)
    if image.channels != cfg.output_channels:
        raise ValueError("image channel count does not match model output")
    opt_tables = Adam(model.tables, lr_tables, beta2=0.99)
    opt_mlp = Adam(model.weights + model.biases, lr_mlp, beta2=0.99)
    n = coords.shape[0]
    for step in range(1, steps + 1):
        pick = rng.integers(0, n, size=min(batch_size, n))
        loss, tg, wg, bg = loss_and_grads(model, coords[pick], targets[pick], quantizers)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}")
        opt_tables.step(tg)
        opt_mlp.step(wg + bg)
        if callback is not None and (step % log_every == 0 or step == steps):
            rendered = render(model, None, image.width, image.height, quantizers=quantizers)
            callback(step, loss, psnr(rendered, image))
    return model


def train(image: RenderTarget, config: NgpConfig, steps: int, seed: int,
          batch_size: int = 1024, lr_tables: float = 1e-2, lr_mlp: float = 1e-3,
          callback=None, log_every: int = 100) -> ToyNgpModel:
    """Fit a fresh model to the reference image. Deterministic for a fixed seed."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ss = np.random.SeedSequence(seed)
    init_seed, batch_seed = ss.spawn(2)
    model = ToyNgpModel.init(config, np.random.default_rng(init_seed).integers(0, 2**31))
    rng = np.random.default_rng(batch_seed)
    return _fit(model, image, steps, rng, None, batch_size, lr_tables, lr_mlp, callback, log_every)


def finetune(model: ToyNgpModel, policy: QuantPolicy, image: RenderTarget,
             steps: int, seed: int, batch_size: int = 1024,
             lr_tables: float = 1e-2, lr_mlp: float = 1e-3,
             callback=None, log_every: int = 100) -> ToyNgpModel:
    """Retrain a copy of the model under fake quantization for the policy.

    Quantization ranges are calibrated once from the model at entry and stay
    frozen for the whole run. steps = 0 returns an unchanged copy.
    """
    tuned = model.copy()
    if steps == 0:
        return tuned
    quantizers = prepare_quantizers(model, policy)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    return _fit(tuned, image, steps, rng, quantizers, batch_size, lr_tables, lr_mlp, callback, log_every)


def psnr(a: RenderTarget, b: RenderTarget) -> float:
    """Peak signal-to-noise ratio in dB (pixel max 1.0), capped at 100."""
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels):
        raise ValueError("image dimensions differ")
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def render(model: ToyNgpModel, policy: QuantPolicy | None, width: int, height: int,
           quantizers: PolicyQuantizers | None = None, chunk: int = 8192) -> RenderTarget:
    """Evaluate the model at every pixel center."""
    if policy is not None and quantizers is None:
        quantizers = prepare_quantizers(model, policy)
    coords = _pixel_center_coords(width, height)
    out = np.empty((coords.shape[0], model.config.output_channels))
    for start in range(0, coords.shape[0], chunk):
        stop = min(start + chunk, coords.shape[0])
        y, _ = _forward_full(model, coords[start:stop], quantizers)
        out[start:stop] = y
    pixels = np.clip(out, 0.0, 1.0).reshape(height, width, model.config.output_channels)
    return RenderTarget(width=width, height=height, pixels=pixels)


def export_trace(model: ToyNgpModel, width: int, height: int, tile_side: int = 32) -> AccessTrace:
    """Table-access trace of one rendering pass.

    Pixels are visited tile by tile (tile_side square subgrids, row-major
    within each tile); each pixel records its four corner entries per level,
    coarse to fine. One GEMM descriptor per MLP layer is emitted per tile
    with M equal to the tile's pixel count.
    """
    cfg = model.config
    n_levels = cfg.num_levels
    pix_chunks, lvl_chunks, ent_chunks = [], [], []
    g_layer, g_m, g_k, g_n = [], [], [], []
    dims = cfg.mlp_layer_dims()
    for ty in range(0, height, tile_side):
        for tx in range(0, width, tile_side):
            ys = np.arange(ty, min(ty + tile_side, height))
            xs = np.arange(tx, min(tx + tile_side, width))
            gx, gy = np.meshgrid(xs, ys)
            px = gx.ravel()
            py = gy.ravel()
            ids = (py * width + px).astype(np.uint32)
            coords = np.stack([(px + 0.5) / width, (py + 0.5) / height], axis=1)
            batch = coords.shape[0]
            idx_all = np.empty((batch, n_levels, 4), dtype=np.int64)
            for l in range(n_levels):
                idx, _ = _corner_indices(coords, l, cfg)
                idx_all[:, l, :] = idx
            pix_chunks.append(np.repeat(ids, n_levels * 4))
            lvl_chunks.append(np.tile(np.repeat(np.arange(n_levels, dtype=np.uint16), 4), batch))
            ent_chunks.append(idx_all.ravel())
            for i, (d_in, d_out) in enumerate(dims):
                g_layer.append(i)
                g_m.append(batch)
                g_k.append(d_in)
                g_n.append(d_out)
    empty = np.empty(0, dtype=np.int64)
    return AccessTrace(
        pixel_ids=np.concatenate(pix_chunks) if pix_chunks else empty,
        levels=np.concatenate(lvl_chunks) if lvl_chunks else empty,
        entry_indices=np.concatenate(ent_chunks) if ent_chunks else empty,
        gemm_layer_ids=np.asarray(g_layer, dtype=np.uint16),
        gemm_m=np.asarray(g_m, dtype=np.uint32),
        gemm_k=np.asarray(g_k, dtype=np.uint32),
        gemm_n=np.asarray(g_n, dtype=np.uint32),
        pixel_count=width * height,
        level_count=n_levels,
        level_entry_counts=np.asarray([cfg.level_rows(l) for l in range(n_levels)], dtype=np.uint32),
        features_per_level=cfg.features_per_level,
    )


_CONFIG_PACK = "<iiii d iii"


def save_checkpoint(path, model: ToyNgpModel) -> None:
    """Write the versioned binary container (magic HNGP, f32 parameters)."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(struct.pack(_CONFIG_PACK, cfg.num_levels, cfg.features_per_level,
                             cfg.table_size_log2, cfg.base_resolution, cfg.growth_factor,
                             cfg.mlp_hidden_layers, cfg.mlp_width, cfg.output_channels))
        for arr in model.parameter_arrays():
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> ToyNgpModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sI")
    if len(blob) < head:
        raise ValueError("checkpoint truncated before header")
    magic, version = struct.unpack_from("<4sI", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg_size = struct.calcsize(_CONFIG_PACK)
    fields = struct.unpack_from(_CONFIG_PACK, blob, head)
    cfg = NgpConfig(num_levels=fields[0], features_per_level=fields[1], table_size_log2=fields[2],
                    base_resolution=fields[3], growth_factor=fields[4], mlp_hidden_layers=fields[5],
                    mlp_width=fields[6], output_channels=fields[7])
    off = head + cfg_size
    tables, weights, biases = [], [], []

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        return arr.astype(np.float64).reshape(shape)

    for l in range(cfg.num_levels):
        tables.append(take((cfg.level_rows(l), cfg.features_per_level)))
    for d_in, d_out in cfg.mlp_layer_dims():
        weights.append(take((d_in, d_out)))
        biases.append(take((d_out,)))
    if off != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return ToyNgpModel(cfg, tables, weights, biases)
