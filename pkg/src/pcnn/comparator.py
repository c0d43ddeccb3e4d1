"""Binary pair comparator: CLS + positional embedding, L blocks of
(N shared-branch self-attention layers, M cross-attention fusions), then a
4-layer MLP head (2D -> 512 -> 32 -> 2 -> 1, GELU + batch norm on the first
two layers) and a sigmoid score.

Trained with momentum SGD under a one-cycle learning-rate schedule on
binary cross-entropy; the checkpoint with the best eval F1 is kept.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .pairsampler import POSITIVE

MLP_WIDTHS = (512, 32, 2, 1)


class TrainingError(RuntimeError):
    pass


@dataclass
class ComparatorConfig:
    depth: int  # D
    tokens: int  # T
    blocks: int = 1  # L
    cross_layers: int = 1  # M
    self_layers: int = 1  # N
    heads: int = 8
    mlp_hidden: int = 32
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.blocks < 0:
            raise ValueError("blocks (L) must be >= 0")
        if self.blocks > 0 and self.depth % self.heads != 0:
            raise nk.ConfigError(
                f"depth {self.depth} not divisible by {self.heads} heads"
            )


def expected_param_count(cfg):
    """Closed-form parameter count; must match the built model exactly."""
    d = cfg.depth
    attn = 4 * (d * d + d)
    n_attn = cfg.blocks * (cfg.self_layers + cfg.cross_layers)
    mlp_in = 2 * d
    mlp = 0
    widths = (mlp_in, 512, cfg.mlp_hidden, 2, 1)
    for a, b in zip(widths, widths[1:]):
        mlp += a * b + b
    bn = 2 * (512 + cfg.mlp_hidden)
    cls_pos = d + (1 + cfg.tokens) * d
    return cls_pos + n_attn * attn + mlp + bn


class ComparatorModel:
    def __init__(self, cfg, seed=42):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.depth
        self.x_cls = nk.Tensor(rng.normal(0, 0.02, size=(1, d)), requires_grad=True)
        self.x_pos = nk.Tensor(
            rng.normal(0, 0.02, size=(1 + cfg.tokens, d)), requires_grad=True
        )
        self.self_attn = [
            [nk.AttentionParams(d, rng) for _ in range(cfg.self_layers)]
            for _ in range(cfg.blocks)
        ]
        self.cross_attn = [
            [nk.AttentionParams(d, rng) for _ in range(cfg.cross_layers)]
            for _ in range(cfg.blocks)
        ]
        widths = (2 * d, 512, cfg.mlp_hidden, 2, 1)
        self.mlp_w, self.mlp_b = [], []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            if i == len(widths) - 2:  # zero-init final layer: untrained score 0.5
                w = np.zeros((a, b))
            else:
                w = rng.normal(0, math.sqrt(2.0 / a), size=(a, b))
            self.mlp_w.append(nk.Tensor(w, requires_grad=True))
            self.mlp_b.append(nk.Tensor(np.zeros(b), requires_grad=True))
        self.bn1 = nk.BatchNormParams(512)
        self.bn2 = nk.BatchNormParams(cfg.mlp_hidden)

    def parameters(self):
        params = [("x_cls", self.x_cls), ("x_pos", self.x_pos)]
        for l, layers in enumerate(self.self_attn):
            for n, p in enumerate(layers):
                for j, t in enumerate(p.tensors()):
                    params.append((f"self.{l}.{n}.{j}", t))
        for l, layers in enumerate(self.cross_attn):
            for m, p in enumerate(layers):
                for j, t in enumerate(p.tensors()):
                    params.append((f"cross.{l}.{m}.{j}", t))
        for i, (w, b) in enumerate(zip(self.mlp_w, self.mlp_b)):
            params.append((f"mlp.{i}.w", w))
            params.append((f"mlp.{i}.b", b))
        params.append(("bn1.gamma", self.bn1.gamma))
        params.append(("bn1.beta", self.bn1.beta))
        params.append(("bn2.gamma", self.bn2.gamma))
        params.append(("bn2.beta", self.bn2.beta))
        return params

    def param_count(self):
        return sum(t.data.size for _, t in self.parameters())

    def state_arrays(self):
        """All mutable numeric state, including batch-norm running stats."""
        arrs = {name: t.data for name, t in self.parameters()}
        arrs["bn1.running_mean"] = self.bn1.running_mean
        arrs["bn1.running_var"] = self.bn1.running_var
        arrs["bn2.running_mean"] = self.bn2.running_mean
        arrs["bn2.running_var"] = self.bn2.running_var
        return arrs

    def snapshot(self):
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def restore(self, snap):
        for name, t in self.parameters():
            t.data = snap[name].copy()
        self.bn1.running_mean = snap["bn1.running_mean"].copy()
        self.bn1.running_var = snap["bn1.running_var"].copy()
        self.bn2.running_mean = snap["bn2.running_mean"].copy()
        self.bn2.running_var = snap["bn2.running_var"].copy()

    # ---- forward -------------------------------------------------------

    def _embed(self, grids):
        b = grids.shape[0]
        d = self.cfg.depth
        cls = nk.broadcast_to(nk.reshape(self.x_cls, (1, 1, d)), (b, 1, d))
        x = nk.concat([cls, nk.Tensor(grids)], axis=1)
        return nk.add(x, self.x_pos)

    def _branch_cls(self, x):
        """Reduce one branch to its CLS row.

        With no attention blocks the CLS row never saw the tokens, so the
        L = 0 model pools the embedded tokens into the CLS path and the MLP
        becomes a standalone comparator on pooled features.
        """
        if self.cfg.blocks == 0:
            cls = nk.slice_axis(x, 1, 0, 1)
            pooled = nk.mean_axis(nk.slice_axis(x, 1, 1, x.shape[1]), axis=1, keepdims=True)
            x = nk.add(cls, pooled)
            return nk.reshape(x, (x.shape[0], self.cfg.depth))
        return nk.reshape(
            nk.slice_axis(x, 1, 0, 1), (x.shape[0], self.cfg.depth)
        )

    def forward_logits(self, grids1, grids2, mode="eval"):
        """Logits for a batch of pairs; grids are (B, T, D) arrays."""
        cfg = self.cfg
        for g in (grids1, grids2):
            if g.shape[1:] != (cfg.tokens, cfg.depth):
                raise nk.ShapeError(
                    f"grid shape {g.shape[1:]} vs config ({cfg.tokens}, {cfg.depth})"
                )
        x1 = self._embed(np.asarray(grids1, dtype=np.float64))
        x2 = self._embed(np.asarray(grids2, dtype=np.float64))
        for l in range(cfg.blocks):
            for p in self.self_attn[l]:
                x1 = nk.add(x1, nk.mhsa(x1, p, cfg.heads))
                x2 = nk.add(x2, nk.mhsa(x2, p, cfg.heads))
            for p in self.cross_attn[l]:
                x1, x2 = nk.cross_attention(x1, x2, p, cfg.heads)
        h = nk.concat([self._branch_cls(x1), self._branch_cls(x2)], axis=1)
        h = nk.gelu(nk.batchnorm(nk.linear(h, self.mlp_w[0], self.mlp_b[0]), self.bn1, mode))
        h = nk.gelu(nk.batchnorm(nk.linear(h, self.mlp_w[1], self.mlp_b[1]), self.bn2, mode))
        h = nk.linear(h, self.mlp_w[2], self.mlp_b[2])
        h = nk.linear(h, self.mlp_w[3], self.mlp_b[3])
        return nk.reshape(h, (h.shape[0],))

    def score_pairs(self, grids1, grids2):
        logits = self.forward_logits(grids1, grids2, mode="eval")
        return nk.sigmoid(logits).data

    def forward_pair(self, grid1, grid2):
        return float(self.score_pairs(grid1[None], grid2[None])[0])


# ----------------------------------------------------------- evaluation


@dataclass
class BinaryMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: dict
    mean_confidence: dict


def metrics_from_scores(scores, labels, threshold=0.5):
    if len(scores) == 0:
        raise ValueError("empty evaluation set")
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores > threshold  # strict: 0.5 exactly is a reject
    pos = labels == POSITIVE
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    acc = (tp + tn) / len(scores)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0

    def mean_conf(mask, accept):
        if not np.any(mask):
            return float("nan")
        s = scores[mask]
        return float(np.mean(s if accept else 1.0 - s))

    return BinaryMetrics(
        accuracy=acc,
        precision=prec,
        recall=rec,
        f1=f1,
        confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        mean_confidence={
            "correctly_accept": mean_conf(pred & pos, True),
            "incorrectly_accept": mean_conf(pred & ~pos, True),
            "correctly_reject": mean_conf(~pred & ~pos, False),
            "incorrectly_reject": mean_conf(~pred & pos, False),
        },
    )


def score_pairset(model, store, pairset, batch_size=256):
    q_split = pairset.split
    scores = np.empty(len(pairset.pairs))
    for start in range(0, len(pairset.pairs), batch_size):
        chunk = pairset.pairs[start : start + batch_size]
        g1 = np.stack([store.grid(q_split, p.query_id) for p in chunk])
        g2 = np.stack([store.grid("train", p.neighbor_id) for p in chunk])
        scores[start : start + len(chunk)] = model.score_pairs(g1, g2)
    return scores


def evaluate_binary(model, store, pairset, threshold=0.5, batch_size=256):
    scores = score_pairset(model, store, pairset, batch_size)
    labels = np.array([p.label for p in pairset.pairs])
    return metrics_from_scores(scores, labels, threshold)


# ------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    momentum: float = 0.9
    max_lr: float = 0.01
    seed: int = 42
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch norm)")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # dicts of per-epoch stats
    selected_epoch: int = -1

    def to_json(self):
        return json.dumps(
            {"epochs": self.epochs, "selected_epoch": self.selected_epoch}, indent=2
        )


def one_cycle_lr(step, total_steps, cfg):
    """Cosine warmup to max_lr, then cosine anneal to max_lr/final_div_factor."""
    t = step / max(total_steps - 1, 1)
    lo, hi = cfg.max_lr / cfg.div_factor, cfg.max_lr
    end = cfg.max_lr / cfg.final_div_factor

    def anneal(a, b, frac):
        return b + (a - b) / 2.0 * (1.0 + math.cos(math.pi * frac))

    if t < cfg.warmup_fraction:
        return anneal(lo, hi, t / cfg.warmup_fraction)
    return anneal(hi, end, (t - cfg.warmup_fraction) / (1.0 - cfg.warmup_fraction))


def train(model, store, train_pairs, eval_pairs, cfg, threshold=0.5):
    """Momentum-SGD training; returns the best-F1 checkpoint and a report."""
    if not train_pairs.pairs or not eval_pairs.pairs:
        raise ValueError("both pair sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    velocity = {name: np.zeros_like(t.data) for name, t in params}

    n = len(train_pairs.pairs)
    q_split = train_pairs.split
    g1_all = np.stack([store.grid(q_split, p.query_id) for p in train_pairs.pairs])
    g2_all = np.stack([store.grid("train", p.neighbor_id) for p in train_pairs.pairs])
    labels_all = np.array([p.label for p in train_pairs.pairs], dtype=np.float64)

    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    report = TrainReport()
    best = (-1.0, -1, None)  # (f1, epoch, snapshot)
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:  # batch norm cannot take a single sample
                continue
            g1, g2, y = g1_all[idx], g2_all[idx], labels_all[idx]
            if model.cfg.jitter_sigma > 0:
                g1 = g1 + rng.normal(0, model.cfg.jitter_sigma, size=g1.shape)
                g2 = g2 + rng.normal(0, model.cfg.jitter_sigma, size=g2.shape)
            lr = one_cycle_lr(step, total_steps, cfg)
            with nk.Tape() as tape:
                logits = model.forward_logits(g1, g2, mode="train")
                loss = nk.bce_with_logits(logits, y)
            if not np.isfinite(loss.data):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            for _, t in params:
                t.grad = None
            nk.backward(tape, loss)
            for name, t in params:
                if t.grad is None:
                    continue
                v = velocity[name]
                v *= cfg.momentum
                v += t.grad
                t.data = t.data - lr * v
            epoch_loss += float(loss.data) * len(idx)
            correct += int(np.sum((logits.data > 0) == (y == 1)))
            step += 1
        metrics = evaluate_binary(model, store, eval_pairs, threshold, cfg.batch_size)
        row = {
            "epoch": epoch,
            "loss": epoch_loss / n,
            "train_accuracy": correct / n,
            "eval_accuracy": metrics.accuracy,
            "precision": metrics.precision,
            "recall": metrics.recall,
            "f1": metrics.f1,
        }
        report.epochs.append(row)
        if metrics.f1 > best[0]:  # strict: ties keep the earliest epoch
            best = (metrics.f1, epoch, model.snapshot())
    report.selected_epoch = best[1]
    model.restore(best[2])
    return model, report


# ----------------------------------------------------------- checkpoints


def save_checkpoint(model, path_blob, path_header, extra=None):
    arrays = model.state_arrays()
    order = sorted(arrays)
    with open(path_blob, "wb") as fh:
        for name in order:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    header = {
        "config": {
            "depth": model.cfg.depth,
            "tokens": model.cfg.tokens,
            "blocks": model.cfg.blocks,
            "cross_layers": model.cfg.cross_layers,
            "self_layers": model.cfg.self_layers,
            "heads": model.cfg.heads,
            "mlp_hidden": model.cfg.mlp_hidden,
            "jitter_sigma": model.cfg.jitter_sigma,
        },
        "arrays": {name: list(arrays[name].shape) for name in order},
        "extra": extra or {},
    }
    with open(path_header, "w") as fh:
        json.dump(header, fh, indent=2)


def load_checkpoint(path_blob, path_header):
    with open(path_header) as fh:
        header = json.load(fh)
    cfg = ComparatorConfig(**header["config"])
    model = ComparatorModel(cfg, seed=0)
    snap = {}
    with open(path_blob, "rb") as fh:
        for name in sorted(header["arrays"]):
            shape = tuple(header["arrays"][name])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            snap[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    model.restore(snap)
    return model, header
