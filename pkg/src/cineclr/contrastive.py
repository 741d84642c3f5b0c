"""Contrastive pretraining: projection head, NT-Xent loss, training loop.

The NT-Xent loss takes 2N projected vectors ordered so that rows (2k, 2k+1)
are a positive pair.  For anchor i with positive p(i),

    L_i = -log( exp(cos(z_i, z_p(i))/tau) / sum_{k != i} exp(cos(z_i, z_k)/tau) )

and the batch loss is the mean of L_i over all 2N anchors (mean rather than
sum so gradients are batch-size invariant).  The loss is implemented as a
single fused tape op with a hand-derived backward rule; correctness is pinned
by a brute-force oracle and finite-difference tests.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np

from .augment import AugPolicy, make_view_pair, view_rng
from .encoder import EncoderConfig, clone_params, encoder_forward, init_encoder
from .errors import CheckpointError, ConfigurationError
from .optim import AdamState, adam_step, clip_grad_norm
from .tensor import Tape, Tensor, backward, dense, relu, _accumulate, _make_output


@dataclass(frozen=True)
class NTXentConfig:
    temperature: float = 0.1
    batch_pairs: int = 32          # N: positive pairs per minibatch
    eps: float = 1e-8

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigurationError(f"ntxent.temperature must be > 0, got {self.temperature}")
        if self.batch_pairs < 2:
            raise ConfigurationError("ntxent.batch_pairs must be >= 2 (need a negative)")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    lr: float = 3e-3
    weight_decay: float = 1e-4
    patience: int = 12
    min_delta: float = 1e-4
    warmup_epochs: int = 0         # linear lr ramp; tames early NT-Xent updates
    clip_norm: float = 0.0         # global gradient-norm cap (<= 0 disables)
    seed: int = 0
    input_mode: str = "full"       # "full" | "segmented"

    def validate(self) -> None:
        if self.patience < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigurationError("pretrain config: need patience >= 1, epochs >= 1, lr > 0")
        if self.warmup_epochs < 0:
            raise ConfigurationError("pretrain.warmup_epochs must be >= 0")
        if self.input_mode not in ("full", "segmented"):
            raise ConfigurationError(f"unknown input_mode {self.input_mode!r}")


def init_projection_head(embed_dim: int, hidden_dim: int, out_dim: int,
                         rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """2-layer MLP head: dense(E->hidden) + ReLU + dense(hidden->out)."""
    from .encoder import kaiming_uniform
    if out_dim < 2:
        raise ConfigurationError("projection head output dim must be >= 2")
    return {
        "proj1.w": Tensor(kaiming_uniform(rng, (hidden_dim, embed_dim), embed_dim, dtype),
                          requires_grad=True),
        "proj1.b": Tensor(np.zeros(hidden_dim, dtype=dtype), requires_grad=True),
        "proj2.w": Tensor(kaiming_uniform(rng, (out_dim, hidden_dim), hidden_dim, dtype),
                          requires_grad=True),
        "proj2.b": Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True),
    }


def project(h: Tensor, head: dict[str, Tensor]) -> Tensor:
    """z = dense2(relu(dense1(h))); works on [E] or [B,E]."""
    return dense(relu(dense(h, head["proj1.w"], head["proj1.b"])),
                 head["proj2.w"], head["proj2.b"])


def ntxent_loss(z: Tensor, cfg: NTXentConfig) -> Tensor:
    """Mean NT-Xent loss over all 2N anchors; rows (2k, 2k+1) are pairs."""
    cfg.validate()
    if z.data.ndim != 2:
        raise ConfigurationError(f"ntxent_loss: expected [2N, P] matrix, got {z.shape}")
    m = z.shape[0]
    if m % 2 or m < 4:
        raise ConfigurationError(
            f"ntxent_loss: need an even number >= 4 of vectors (no negatives otherwise), got {m}")
    tau = cfg.temperature
    zd = z.data
    norms = np.maximum(np.linalg.norm(zd, axis=1), cfg.eps)
    u = zd / norms[:, None]
    sim = (u @ u.T) / tau
    np.fill_diagonal(sim, -np.inf)
    pos = np.arange(m) ^ 1                       # partner of each anchor
    row_max = sim.max(axis=1)
    expd = np.exp(sim - row_max[:, None])
    denom = expd.sum(axis=1)
    losses = np.log(denom) + row_max - sim[np.arange(m), pos]
    val = np.asarray(losses.mean(), dtype=zd.dtype)
    out, tape = _make_output(val, (z,), "ntxent_loss")
    if tape is not None:
        def bwd():
            p = expd / denom[:, None]            # softmax over k != i
            g_sim = p
            g_sim[np.arange(m), pos] -= 1.0
            g_sim /= m
            g_sim[np.arange(m), np.arange(m)] = 0.0
            gu = ((g_sim + g_sim.T) @ u) / tau
            # through row normalization: project out the radial component
            # wherever the true norm exceeded eps
            radial = (gu * u).sum(axis=1, keepdims=True)
            true_norms = np.linalg.norm(zd, axis=1)
            proj = np.where((true_norms > cfg.eps)[:, None], gu - radial * u, gu)
            _accumulate(z, out.grad * proj / norms[:, None])
        tape.record(out, bwd)
    return out


def ntxent_oracle(z: np.ndarray, temperature: float, eps: float = 1e-8) -> float:
    """Brute-force termwise evaluation of the loss in double precision."""
    z = np.asarray(z, dtype=np.float64)
    m = len(z)
    total = 0.0
    for i in range(m):
        p = i ^ 1

        def cos(a, b):
            return float(a @ b / (max(np.linalg.norm(a), eps) * max(np.linalg.norm(b), eps)))

        num = np.exp(cos(z[i], z[p]) / temperature)
        den = sum(np.exp(cos(z[i], z[k]) / temperature) for k in range(m) if k != i)
        total += -np.log(num / den)
    return total / m


# ---------------------------------------------------------------------------
# pretraining loop


@dataclass
class PretrainResult:
    params: dict               # encoder params at the best validation epoch
    head: dict                 # projection head at the best validation epoch
    train_curve: list          # mean minibatch loss per epoch
    val_curve: list            # validation loss per epoch
    best_epoch: int            # 1-based


def _forward_loss(enc_params, head, batch, enc_cfg, nt_cfg):
    x = Tensor(batch)
    h = encoder_forward(enc_params, x, enc_cfg)
    z = project(h, head)
    return ntxent_loss(z, nt_cfg)


def _collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.grad for k, v in params.items() if v.grad is not None}


def _zero_grads(params: dict[str, Tensor]) -> None:
    for v in params.values():
        v.grad = None


def pretrain(images: list, val_images: list, enc_cfg: EncoderConfig,
             cfg: PretrainConfig, nt_cfg: NTXentConfig, policy: AugPolicy,
             proj_hidden: int | None = None, proj_out: int = 32) -> PretrainResult:
    """Train an encoder with NT-Xent over augmented view pairs.

    ``images`` / ``val_images`` are (1,H,W) float32 arrays already masked per
    the configured input mode.  Early stopping watches the validation loss on
    a view set frozen by a dedicated seed, and the best-epoch parameters are
    returned.
    """
    cfg.validate()
    nt_cfg.validate()
    n_pairs = nt_cfg.batch_pairs
    if len(images) < 2:
        raise ConfigurationError(f"pretrain: need >= 2 training images, got {len(images)}")
    if not val_images:
        raise ConfigurationError("pretrain: need a nonempty validation set")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(77,)))
    enc_params = init_encoder(enc_cfg, rng)
    head = init_projection_head(enc_cfg.embed_dim, proj_hidden or enc_cfg.embed_dim,
                                proj_out, rng)
    all_params = {**enc_params, **head}
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    # validation views are fixed once so the early-stop criterion is stable
    val_views = []
    for i, img in enumerate(val_images):
        pair = make_view_pair(img, policy, view_rng(cfg.seed ^ 0x5EED, 0, i))
        val_views.extend([pair.view_a, pair.view_b])
    val_batch = np.stack(val_views).astype(np.float32)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(78,)))
    train_curve, val_curve = [], []
    best_val = np.inf
    best_epoch = 0
    best_params, best_head = clone_params(enc_params), clone_params(head)
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        if cfg.warmup_epochs:
            state.lr = cfg.lr * min(1.0, epoch / (cfg.warmup_epochs + 1))
        order = shuffle_rng.permutation(len(images))
        epoch_losses = []
        for start in range(0, len(order), n_pairs):
            idx = order[start:start + n_pairs]
            if len(idx) < 2:
                continue            # a single leftover pair has no negatives
            views = []
            for i in idx:
                pair = make_view_pair(images[i], policy, view_rng(cfg.seed, epoch, int(i)))
                views.extend([pair.view_a, pair.view_b])
            batch = np.stack(views).astype(np.float32)
            with Tape() as tape:
                loss = _forward_loss(enc_params, head, batch, enc_cfg, nt_cfg)
            backward(tape, loss)
            grads = _collect_grads(all_params)
            _zero_grads(all_params)
            clip_grad_norm(grads, cfg.clip_norm)
            adam_step(all_params, grads, state)
            epoch_losses.append(loss.item())
        train_curve.append(float(np.mean(epoch_losses)))

        val_loss = _forward_loss(enc_params, head, val_batch, enc_cfg, nt_cfg).item()
        val_curve.append(val_loss)
        if val_loss < best_val - cfg.min_delta:
            best_val = val_loss
            best_epoch = epoch
            best_params, best_head = clone_params(enc_params), clone_params(head)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_epoch == 0:             # validation never improved; keep epoch 1
        best_epoch = 1
    return PretrainResult(params=best_params, head=best_head,
                          train_curve=train_curve, val_curve=val_curve,
                          best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# checkpoint format: magic "CLRW", format version, named parameter blobs,
# then the pretraining config echoed as JSON for provenance.

CHECKPOINT_MAGIC = b"CLRW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], config: PretrainConfig) -> None:
    import json
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data)
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", data.ndim, 0 if data.dtype == np.float32 else 1))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4" if data.dtype == np.float32 else "<f8").tobytes())
        cfg_blob = json.dumps(asdict(config), sort_keys=True).encode()
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)


def load_checkpoint(path) -> tuple[dict[str, Tensor], PretrainConfig]:
    import json
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
        off = 4
        version, count = struct.unpack_from("<II", raw, off)
        off += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode()
            off += nlen
            ndim, dcode = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dtype = np.dtype("<f4") if dcode == 0 else np.dtype("<f8")
            nbytes = int(np.prod(shape)) * dtype.itemsize
            data = np.frombuffer(raw[off:off + nbytes], dtype=dtype).reshape(shape)
            if data.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: truncated blob for {name!r}")
            off += nbytes
            params[name] = Tensor(data.astype(dtype.newbyteorder("=")), requires_grad=True)
        (clen,) = struct.unpack_from("<I", raw, off)
        off += 4
        cfg = PretrainConfig(**json.loads(raw[off:off + clen].decode()))
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return params, cfg
