"""A small multi-head transformer encoder with LoRA adapters and dropout
hooks at every supported position.

The backbone (embeddings, projections, FFN, layer norms) is drawn from a
fixed-seed initialization and frozen, standing in for a pretrained
checkpoint; only the low-rank key/value adapters and the head train.
Dropout behaviour is configured by a list of DropoutSpec values and is
disabled entirely outside training mode.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .dropout import (
    DropoutSpec,
    Position,
    drop_attention,
    drop_key,
    hidden_cut,
    input_cutoff,
    output_dropout,
)
from .errors import ContractError, DimensionError
from .masks import AxisSemantics, sample_mask_stack
from .tensor import Tensor

_POSITION_CODE = {
    Position.ATTN_LOGITS: 1,
    Position.ATTN_WEIGHTS: 2,
    Position.FFN_HIDDEN: 3,
    Position.INPUT_EMBED: 4,
    Position.OUTPUT_REPR: 5,
}

_MASK_SEMANTICS = {
    Position.ATTN_LOGITS: AxisSemantics.KEYS_QUERIES,
    Position.ATTN_WEIGHTS: AxisSemantics.KEYS_QUERIES,
    Position.FFN_HIDDEN: AxisSemantics.LENGTH_HIDDEN,
    Position.INPUT_EMBED: AxisSemantics.LENGTH_HIDDEN,
}


def derive_mask_seed(mask_seed: int, branch: int, layer: int, position: Position) -> int:
    """Stable seed for one (step, branch, layer, position) mask stream."""
    ss = np.random.SeedSequence([int(mask_seed), int(branch), int(layer) + 16, _POSITION_CODE[position]])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class ModelConfig:
    num_layers: int = 4
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 32
    max_len: int = 32
    lora_rank: int = 8
    lora_alpha: float = 16.0
    head: str = "classifier"  # classifier | regressor
    num_classes: int = 32
    backbone_seed: int = 1234
    ln_eps: float = 1e-5
    activation: str = "relu"  # relu | gelu

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.lora_rank < 1:
            raise ContractError("lora_rank must be >= 1")
        if self.head not in ("classifier", "regressor"):
            raise ContractError(f"unknown head kind {self.head!r}")
        if self.head == "classifier" and self.num_classes < 2:
            raise ContractError("classifier needs num_classes >= 2")
        if self.activation not in ("relu", "gelu"):
            raise ContractError(f"unknown activation {self.activation!r}")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


@dataclass
class ForwardTrace:
    """Per-layer captures (numpy copies) for inspection and diagnostics."""

    logits_per_layer: list = field(default_factory=list)
    weights_per_layer: list = field(default_factory=list)
    hidden_per_layer: list = field(default_factory=list)
    output_distribution: np.ndarray | None = None
    pooled: np.ndarray | None = None


@dataclass
class ForwardResult:
    output: Tensor  # [B, C] probability rows, or [B] scalar predictions
    pooled: Tensor  # [B, d_model] representation fed to the head
    trace: ForwardTrace | None = None


class LoRALinear:
    """Frozen base weight plus a trainable low-rank delta.

    forward(x) = x @ W0^T + (alpha/r) * x @ A^T @ B^T, with A Gaussian and
    B zero at initialization so the initial forward equals the frozen layer.
    """

    def __init__(self, w0: np.ndarray, rank: int, alpha: float, rng: np.random.Generator):
        d_out, d_in = w0.shape
        if rank < 1:
            raise ContractError("LoRA rank must be >= 1")
        self.w0 = Tensor(w0)
        self.a = Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)), requires_grad=True)
        self.b = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        self.rank = rank
        self.alpha = float(alpha)

    def __call__(self, x: Tensor) -> Tensor:
        base = T.matmul(x, T.transpose(self.w0))
        delta = T.matmul(T.matmul(x, T.transpose(self.a)), T.transpose(self.b))
        return T.add(base, T.scale(delta, self.alpha / self.rank))


class Model:
    """Transformer encoder with LoRA on the key/value projections."""

    def __init__(self, config: ModelConfig, dropout_specs: list[DropoutSpec] | None = None,
                 init_seed: int = 0):
        self.config = config
        specs = list(dropout_specs or [])
        active = [s for s in specs if s.position is not Position.NONE]
        positions = [s.position for s in active]
        if len(positions) != len(set(positions)):
            raise ContractError("duplicate dropout specs for the same position")
        self.specs = {s.position: s for s in active}

        c = config
        rng = np.random.default_rng(c.backbone_seed)
        self.params: dict[str, Tensor] = {}

        def frozen(name, arr):
            t = Tensor(arr)
            self.params[name] = t
            return t

        d, h, dff = c.d_model, c.num_heads, c.d_ff
        s_model = 1.0 / np.sqrt(d)
        self.tok_emb = frozen("emb.tok", rng.normal(0.0, 1.0, size=(c.vocab_size, d)))
        self.pos_emb = frozen("emb.pos", rng.normal(0.0, 1.0, size=(c.max_len, d)))
        self.layers = []
        for i in range(c.num_layers):
            pre = f"layer{i}."
            wq = frozen(pre + "attn.wq", rng.normal(0.0, s_model, size=(d, d)))
            w0k = rng.normal(0.0, s_model, size=(d, d))
            w0v = rng.normal(0.0, s_model, size=(d, d))
            wo = frozen(pre + "attn.wo", rng.normal(0.0, s_model, size=(d, d)))
            ln1_g = frozen(pre + "ln1.gamma", np.ones(d))
            ln1_b = frozen(pre + "ln1.beta", np.zeros(d))
            w1 = frozen(pre + "ffn.w1", rng.normal(0.0, s_model, size=(dff, d)))
            w2 = frozen(pre + "ffn.w2", rng.normal(0.0, 1.0 / np.sqrt(dff), size=(d, dff)))
            ln2_g = frozen(pre + "ln2.gamma", np.ones(d))
            ln2_b = frozen(pre + "ln2.beta", np.zeros(d))
            self.layers.append({
                "wq": wq, "wo": wo, "ln1_g": ln1_g, "ln1_b": ln1_b,
                "w1": w1, "w2": w2,
                "ln2_g": ln2_g, "ln2_b": ln2_b,
                "w0k": w0k, "w0v": w0v,
            })

        rng_init = np.random.default_rng(np.random.SeedSequence([int(init_seed), 0xADA]))
        for i, layer in enumerate(self.layers):
            pre = f"layer{i}."
            lk = LoRALinear(layer["w0k"], c.lora_rank, c.lora_alpha, rng_init)
            lv = LoRALinear(layer["w0v"], c.lora_rank, c.lora_alpha, rng_init)
            layer["lora_k"], layer["lora_v"] = lk, lv
            self.params[pre + "attn.wk.w0"] = lk.w0
            self.params[pre + "attn.wk.a"] = lk.a
            self.params[pre + "attn.wk.b"] = lk.b
            self.params[pre + "attn.wv.w0"] = lv.w0
            self.params[pre + "attn.wv.a"] = lv.a
            self.params[pre + "attn.wv.b"] = lv.b

        out_dim = c.num_classes if c.head == "classifier" else 1
        self.head_w = Tensor(np.zeros((out_dim, d)), requires_grad=True)
        self.head_b = Tensor(np.zeros(out_dim), requires_grad=True)
        self.params["head.w"] = self.head_w
        self.params["head.b"] = self.head_b

    # ------------------------------------------------------------------
    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def trainable_parameter_count(self) -> int:
        return sum(p.size for p in self.trainable_parameters().values())

    def zero_grad(self) -> None:
        for p in self.trainable_parameters().values():
            p.zero_grad()

    # ------------------------------------------------------------------
    def _spec_active(self, position: Position, layer_idx: int, training: bool) -> DropoutSpec | None:
        spec = self.specs.get(position)
        if spec is None or not training or spec.rate == 0.0:
            return None
        if layer_idx >= 0 and not spec.applies_to_layer(layer_idx, self.config.num_layers):
            return None
        return spec

    def _mask_stack(self, spec: DropoutSpec, layer_idx: int, n: int, rows: int, cols: int,
                    mask_seed: int, branch: int, overrides) -> np.ndarray:
        key = (layer_idx, spec.position)
        if overrides and key in overrides:
            return np.asarray(overrides[key])
        seed = derive_mask_seed(mask_seed, branch, layer_idx, spec.position)
        return sample_mask_stack(n, rows, cols, spec.pattern, spec.rate, seed,
                                 _MASK_SEMANTICS[spec.position])

    # ------------------------------------------------------------------
    def forward(self, tokens: np.ndarray, training: bool = False, mask_seed: int = 0,
                branch: int = 0, trace: bool = False, mask_overrides=None) -> ForwardResult:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be [batch, length], got {tokens.shape}")
        B, L = tokens.shape
        c = self.config
        if L > c.max_len:
            raise ContractError(f"sequence length {L} exceeds max_len {c.max_len}")
        if np.any(tokens < 0) or np.any(tokens >= c.vocab_size):
            raise ContractError("token ids out of range")

        rec = ForwardTrace() if trace else None
        H = c.num_heads
        dh = c.d_model // H

        x = T.add(T.embedding(self.tok_emb, tokens), T.embedding(self.pos_emb, np.arange(L)))
        spec = self._spec_active(Position.INPUT_EMBED, -1, training)
        if spec is not None:
            keep = self._mask_stack(spec, -1, B, L, c.d_model, mask_seed, branch, mask_overrides)
            x = input_cutoff(x, keep, spec.rate, training=True)

        for i, layer in enumerate(self.layers):
            x = self._attention_block(x, i, layer, B, L, H, dh, training, mask_seed, branch,
                                      mask_overrides, rec)
            x = self._ffn_block(x, i, layer, B, L, training, mask_seed, branch, mask_overrides, rec)

        pooled = T.take_token(x, 0)
        spec = self._spec_active(Position.OUTPUT_REPR, -1, training)
        if spec is not None:
            key = (-1, Position.OUTPUT_REPR)
            if mask_overrides and key in mask_overrides:
                keep = np.asarray(mask_overrides[key], dtype=np.float64)
                pooled = T.mul(pooled, Tensor(keep * (1.0 / (1.0 - spec.rate))))
            else:
                seed = derive_mask_seed(mask_seed, branch, -1, Position.OUTPUT_REPR)
                pooled = output_dropout(pooled, spec.rate, seed, training=True)

        logits = T.add(T.matmul(pooled, T.transpose(self.head_w)), self.head_b)
        if c.head == "classifier":
            output = T.softmax_row(logits)
        else:
            output = T.reshape(logits, (B,))

        if rec is not None:
            rec.output_distribution = output.data.copy()
            rec.pooled = pooled.data.copy()
        return ForwardResult(output=output, pooled=pooled, trace=rec)

    def _attention_block(self, x, i, layer, B, L, H, dh, training, mask_seed, branch,
                         overrides, rec):
        c = self.config
        q = T.matmul(x, T.transpose(layer["wq"]))
        k = layer["lora_k"](x)
        v = layer["lora_v"](x)

        def split(t):
            return T.transpose(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        qh, kh, vh = split(q), split(k), split(v)
        logits = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))

        spec = self._spec_active(Position.ATTN_LOGITS, i, training)
        if spec is not None:
            keep = self._mask_stack(spec, i, B * H, L, L, mask_seed, branch, overrides)
            logits = drop_key(logits, keep.reshape(B, H, L, L))
        if rec is not None:
            rec.logits_per_layer.append(logits.data.copy())

        weights = T.softmax_row(logits)
        spec = self._spec_active(Position.ATTN_WEIGHTS, i, training)
        if spec is not None:
            keep = self._mask_stack(spec, i, B * H, L, L, mask_seed, branch, overrides)
            keep = keep.reshape(B, H, L, L)
            # structural repair keeps one key per row, but a sharply peaked
            # row can still lose all its numeric mass (surviving weights can
            # underflow to 0 in float64); give such rows their dominant key
            # back rather than dividing by nothing. Drop-before-softmax has
            # no analogue of this failure.
            surviving = np.sum(weights.data * keep, axis=-1)
            starved = surviving < 1e-12
            if np.any(starved):
                keep = keep.copy()
                top = np.argmax(weights.data, axis=-1)
                b_i, h_i, q_i = np.nonzero(starved)
                keep[b_i, h_i, q_i, top[b_i, h_i, q_i]] = 1
            weights = drop_attention(weights, keep, spec.grad_stop_denominator)
        if rec is not None:
            rec.weights_per_layer.append(weights.data.copy())

        ctx = T.matmul(weights, vh)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, c.d_model))
        out = T.matmul(merged, T.transpose(layer["wo"]))
        return T.layer_norm(T.add(x, out), layer["ln1_g"], layer["ln1_b"], c.ln_eps)

    def _ffn_block(self, x, i, layer, B, L, training, mask_seed, branch, overrides, rec):
        c = self.config
        act = T.gelu if c.activation == "gelu" else T.relu
        h = act(T.matmul(x, T.transpose(layer["w1"])))
        spec = self._spec_active(Position.FFN_HIDDEN, i, training)
        if spec is not None:
            keep = self._mask_stack(spec, i, B, L, c.d_ff, mask_seed, branch, overrides)
            h = hidden_cut(h, keep, spec.rate, training=True)
        if rec is not None:
            rec.hidden_per_layer.append(h.data.copy())
        out = T.matmul(h, T.transpose(layer["w2"]))
        return T.layer_norm(T.add(x, out), layer["ln2_g"], layer["ln2_b"], c.ln_eps)

    # ------------------------------------------------------------------
    def save_checkpoint(self, path) -> None:
        """Write every parameter plus the model-config hash; float64 blobs
        round-trip bit-exactly."""
        payload = {name.replace(".", "__"): p.data for name, p in self.params.items()}
        payload["__config_hash__"] = np.frombuffer(
            self.config.config_hash().encode(), dtype=np.uint8
        )
        # write through a handle so the exact filename is used (no .npz suffix)
        with open(path, "wb") as f:
            np.savez(f, **payload)

    def load_checkpoint(self, path) -> None:
        with np.load(path) as blob:
            stored = bytes(blob["__config_hash__"]).decode()
            if stored != self.config.config_hash():
                raise ContractError(
                    f"checkpoint config hash {stored} does not match model {self.config.config_hash()}"
                )
            for name, p in self.params.items():
                key = name.replace(".", "__")
                arr = blob[key]
                if arr.shape != p.data.shape:
                    raise DimensionError(f"checkpoint blob {name} has shape {arr.shape}, expected {p.data.shape}")
                p.data = arr.astype(np.float64)


def trainable_parameter_count(config: ModelConfig) -> int:
    """Closed-form count: two adapted projections per layer plus the head."""
    c = config
    per_layer = 2 * (c.lora_rank * c.d_model + c.d_model * c.lora_rank)
    out_dim = c.num_classes if c.head == "classifier" else 1
    return c.num_layers * per_layer + out_dim * c.d_model + out_dim
