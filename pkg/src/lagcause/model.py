"""Decoder-only transformer and MLP backbones for next-step forecasting.

A length-L window over p variables is flattened to L*p tokens in time-major
order. Each token embeds its scalar through a learned 1-to-d projection plus
node and time embeddings (and an optional domain embedding). A block-causal
mask allows attention within the same step and to earlier steps only; the
output head reads every token and the prediction of variable j for the step
after window row tau is taken from coordinate j at token (tau, j).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_MASK = -1e9


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    p: int
    L: int
    backbone: str = "transformer"  # "transformer" | "mlp"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    ffn_hidden: int | None = None  # defaults to 2 * d_model
    use_domain_embedding: bool = False
    n_domains: int = 1

    def __post_init__(self):
        if self.backbone not in ("transformer", "mlp"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.L < 1 or self.p < 1:
            raise ConfigError("need p >= 1 and L >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.d_model
        if self.use_domain_embedding and self.n_domains < 1:
            raise ConfigError("domain embedding enabled with n_domains < 1")

    @property
    def n_tokens(self) -> int:
        return self.L * self.p

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 3
    max_steps: int | None = None
    seed: int = 0
    plateau_window: int = 200
    plateau_rel_tol: float = 1e-4

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Gaussian(0, 0.02) projections/embeddings, unit LN scales, zero biases."""
    std = 0.02
    params: dict[str, np.ndarray] = {}

    def gauss(*shape):
        return rng.normal(0.0, std, size=shape)

    if config.backbone == "mlp":
        h = config.ffn_hidden
        params["mlp.w1"] = gauss(config.n_tokens, h)
        params["mlp.b1"] = np.zeros(h)
        params["mlp.w2"] = gauss(h, config.p)
        params["mlp.b2"] = np.zeros(config.p)
        return params

    d = config.d_model
    params["token_proj"] = gauss(d)
    params["node_embed"] = gauss(config.p, d)
    params["time_embed"] = gauss(config.L, d)
    if config.use_domain_embedding:
        params["domain_embed"] = gauss(config.n_domains, d)
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        params[pre + "ln1.gamma"] = np.ones(d)
        params[pre + "ln1.beta"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + "attn." + name] = gauss(d, d)
            params[pre + "attn.b" + name[1]] = np.zeros(d)
        params[pre + "ln2.gamma"] = np.ones(d)
        params[pre + "ln2.beta"] = np.zeros(d)
        params[pre + "ffn.w1"] = gauss(d, config.ffn_hidden)
        params[pre + "ffn.b1"] = np.zeros(config.ffn_hidden)
        params[pre + "ffn.w2"] = gauss(config.ffn_hidden, d)
        params[pre + "ffn.b2"] = np.zeros(d)
    params["final_ln.gamma"] = np.ones(d)
    params["final_ln.beta"] = np.zeros(d)
    params["head.weight"] = gauss(d, config.p)
    params["head.bias"] = np.zeros(config.p)
    return params


@dataclass
class PredictorModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def validate(self):
        ref = init_parameters(self.config, np.random.default_rng(0))
        if set(ref) != set(self.params):
            missing = set(ref) ^ set(self.params)
            raise ConfigError(f"parameter names inconsistent with config: {sorted(missing)[:4]}")
        for k, v in self.params.items():
            if v.shape != ref[k].shape:
                raise ConfigError(f"parameter {k} has shape {v.shape}, expected {ref[k].shape}")
            if not np.all(np.isfinite(v)):
                raise ConfigError(f"parameter {k} contains non-finite values")


def new_model(config: ModelConfig, seed: int = 0) -> PredictorModel:
    return PredictorModel(config, init_parameters(config, np.random.default_rng(seed)))


def build_mask(L: int, p: int) -> np.ndarray:
    """Block-causal boolean mask: token a may attend to b iff a's step >= b's step."""
    steps = np.arange(L * p) // p
    return steps[:, None] >= steps[None, :]


def token_order(L: int, p: int) -> list[tuple[int, int]]:
    """Token positions as (time_row, variable) pairs, time-major."""
    return [(t, j) for t in range(L) for j in range(p)]


def tokenize_window(
    model: PredictorModel,
    window: np.ndarray,
    domain_index: int | None = None,
) -> np.ndarray:
    """Embed a single (L, p) window into (L*p, d_model) token vectors."""
    cfg = model.config
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (cfg.L, cfg.p):
        raise ad.DimensionError(f"window shape {window.shape}, expected {(cfg.L, cfg.p)}")
    if not np.all(np.isfinite(window)):
        raise ad.DimensionError("window contains non-finite values")
    if cfg.use_domain_embedding:
        if domain_index is None or not (0 <= domain_index < cfg.n_domains):
            raise ConfigError(f"domain_index {domain_index} outside [0, {cfg.n_domains})")
    scalars = window.reshape(-1, 1)
    emb = scalars * model.params["token_proj"][None, :]
    node_idx = np.arange(cfg.n_tokens) % cfg.p
    time_idx = np.arange(cfg.n_tokens) // cfg.p
    emb = emb + model.params["node_embed"][node_idx] + model.params["time_embed"][time_idx]
    if cfg.use_domain_embedding and domain_index is not None:
        emb = emb + model.params["domain_embed"][domain_index]
    return emb


def _wrap_params(params: dict[str, np.ndarray], trainable: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable) for k, v in params.items()}


def transformer_outputs(
    config: ModelConfig,
    tp: dict[str, Tensor],
    window: Tensor,
    domain_index: np.ndarray | None = None,
    collect_attention: list | None = None,
) -> Tensor:
    """Forward pass over a (B, L, p) window batch; returns (B, L, p) predictions.

    Row tau of the output predicts the step following window row tau.
    """
    B = window.shape[0]
    L, p, d = config.L, config.p, config.d_model
    T = L * p
    H = config.n_heads
    dh = d // H
    if window.shape[1:] != (L, p):
        raise ad.DimensionError(f"window batch shape {window.shape}, expected (B, {L}, {p})")

    scalars = ad.reshape(window, (B, T, 1))
    h = ad.mul(scalars, ad.reshape(tp["token_proj"], (1, 1, d)))
    node_idx = np.arange(T) % p
    time_idx = np.arange(T) // p
    pos = ad.add(ad.embedding_lookup(tp["node_embed"], node_idx),
                 ad.embedding_lookup(tp["time_embed"], time_idx))
    h = ad.add(h, pos)
    if config.use_domain_embedding:
        if domain_index is None:
            raise ConfigError("model expects a domain index per window")
        dom = ad.embedding_lookup(tp["domain_embed"], np.asarray(domain_index, dtype=int))
        h = ad.add(h, ad.reshape(dom, (B, 1, d)))

    mask_add = np.where(build_mask(L, p), 0.0, NEG_MASK)[None, None, :, :]
    inv_sqrt = ad.constant(np.float64(1.0 / math.sqrt(dh)))

    def heads(x: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))

    for i in range(config.n_layers):
        pre = f"layers.{i}."
        a = ad.layer_norm(h, tp[pre + "ln1.gamma"], tp[pre + "ln1.beta"])
        # 1/sqrt(dh) folded into q before the head split to stay on (B, T, d).
        q = heads(ad.mul(ad.affine(a, tp[pre + "attn.wq"], tp[pre + "attn.bq"]), inv_sqrt))
        k = heads(ad.affine(a, tp[pre + "attn.wk"], tp[pre + "attn.bk"]))
        v = heads(ad.affine(a, tp[pre + "attn.wv"], tp[pre + "attn.bv"]))
        ctx, probs = ad.attention(q, k, v, mask_add)
        if collect_attention is not None:
            collect_attention.append(probs)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        h = ad.add(h, ad.affine(ctx, tp[pre + "attn.wo"], tp[pre + "attn.bo"]))
        f = ad.layer_norm(h, tp[pre + "ln2.gamma"], tp[pre + "ln2.beta"])
        f = ad.relu(ad.affine(f, tp[pre + "ffn.w1"], tp[pre + "ffn.b1"]))
        h = ad.add(h, ad.affine(f, tp[pre + "ffn.w2"], tp[pre + "ffn.b2"]))

    h = ad.layer_norm(h, tp["final_ln.gamma"], tp["final_ln.beta"])
    out = ad.affine(h, tp["head.weight"], tp["head.bias"])  # (B, T, p)
    # Coordinate j of token (tau, j) owns the prediction of variable j.
    eye = ad.constant(np.eye(p)[None, None, :, :])
    preds = ad.reduce_sum(ad.mul(ad.reshape(out, (B, L, p, p)), eye), axis=3)
    return preds


def mlp_outputs(config: ModelConfig, tp: dict[str, Tensor], window: Tensor) -> Tensor:
    """Two-layer ReLU MLP over the flattened window; predicts only the next step."""
    B = window.shape[0]
    flat = ad.reshape(window, (B, config.n_tokens))
    hidden = ad.relu(ad.affine(flat, tp["mlp.w1"], tp["mlp.b1"]))
    return ad.affine(hidden, tp["mlp.w2"], tp["mlp.b2"])


class NetworkPredictor:
    """Attribution-facing wrapper around a trained PredictorModel."""

    def __init__(self, model: PredictorModel):
        self.model = model
        self.L = model.config.L
        self.p = model.config.p

    @property
    def backbone(self) -> str:
        return self.model.config.backbone

    def predict_next(
        self,
        window: Tensor,
        domain_index: np.ndarray | None = None,
        collect_attention: list | None = None,
    ) -> Tensor:
        tp = _wrap_params(self.model.params, trainable=False)
        if self.model.config.backbone == "mlp":
            if collect_attention is not None:
                raise ConfigError("attention readout requires the transformer backbone")
            return mlp_outputs(self.model.config, tp, window)
        preds = transformer_outputs(self.model.config, tp, window, domain_index,
                                    collect_attention)
        B = window.shape[0]
        return ad.reshape(ad.slice_(preds, (slice(None), slice(self.L - 1, self.L))),
                          (B, self.p))


class LinearLagPredictor:
    """Hand-built linear next-step map with explicit (target, source, lag) weights."""

    backbone = "linear"

    def __init__(self, weights: np.ndarray):
        if weights.ndim != 3 or weights.shape[0] != weights.shape[1]:
            raise ad.DimensionError(f"weights must be (p, p, L), got {weights.shape}")
        self.weights = np.asarray(weights, dtype=np.float64)
        self.p, _, self.L = self.weights.shape
        # Window row r holds lag L - r; flatten time-major to (L*p, p).
        flat = np.zeros((self.L * self.p, self.p))
        for r in range(self.L):
            flat[r * self.p:(r + 1) * self.p, :] = self.weights[:, :, self.L - r - 1].T
        self._flat = flat

    def predict_next(self, window: Tensor, domain_index=None, collect_attention=None) -> Tensor:
        if collect_attention is not None:
            raise ConfigError("attention readout requires the transformer backbone")
        B = window.shape[0]
        flat = ad.reshape(window, (B, self.L * self.p))
        return ad.matmul(flat, ad.constant(self._flat))


# ---------------------------------------------------------------------------
# Checkpoints: flat little-endian blob + JSON manifest


def save_checkpoint(
    model: PredictorModel,
    path: str | Path,
    train_config: TrainConfig | None = None,
    seed: int | None = None,
    extra_meta: dict | None = None,
) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    manifest_path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(model.params)
    blob = b"".join(np.asarray(model.params[n], dtype="<f8").tobytes() for n in names)
    path.write_bytes(blob)
    manifest = {
        "format": "lagcause-checkpoint-v1",
        "dtype": "<f8",
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "seed": seed,
    }
    if extra_meta:
        manifest.update(extra_meta)
    from .graphs import dumps_canonical

    manifest_path.write_text(dumps_canonical(manifest))
    return path, manifest_path


def load_checkpoint(path: str | Path) -> tuple[PredictorModel, dict]:
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    manifest_path = path.with_suffix(".json")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint blob not found: {path}")
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        params[entry["name"]] = raw[offset:offset + size].reshape(shape).copy()
        offset += size
    if offset != raw.size:
        raise ConfigError(f"checkpoint blob size {raw.size} != manifest total {offset}")
    model = PredictorModel(ModelConfig.from_dict(manifest["model_config"]), params)
    model.validate()
    return model, manifest
