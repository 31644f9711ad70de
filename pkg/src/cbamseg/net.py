"""Toy anchor-free one-stage segmenter with a prototype-mask head.

Backbone: stride-2 3x3 convolutions, each followed by SiLU and (optionally) a
CBAM block.  A grid head on the last feature map predicts, per cell,
objectness, a box, class logits and mask coefficients; a prototype branch on
the feature map of matching resolution predicts shared mask prototypes.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .cbam import CbamParams, cbam_forward, hidden_width
from .labels import InstanceRecord
from .metrics import cxcywh_to_xyxy, iou_box
from .tensor import Parameter, ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class NetConfig:
    image_size: int = 96
    channels: tuple[int, ...] = (8, 16, 32, 64)
    cbam: bool = False
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    num_classes: int = 2
    prototypes: int = 8
    proto_size: int = 24
    proto_hidden: int = 16
    head_hidden: int = 32
    obj_bias: float = -2.0
    loss_weights: tuple[float, float, float, float] = (1.0, 5.0, 1.0, 1.0)
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16
    weight_decay: float = 0.0
    grad_clip: float = 10.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    @property
    def grid(self) -> int:
        return self.image_size // 2 ** len(self.channels)

    @property
    def cell_dim(self) -> int:
        return 5 + self.num_classes + self.prototypes

    @property
    def proto_block(self) -> int:
        """Index of the backbone block whose output feeds the prototype branch."""
        return int(round(math.log2(self.image_size / self.proto_size))) - 1

    def validate(self) -> None:
        if not self.channels or any(c < 1 for c in self.channels):
            raise ShapeError(f"invalid channel plan {self.channels}")
        if self.image_size % 2 ** len(self.channels):
            raise ShapeError(f"image size {self.image_size} is not divisible by 2^{len(self.channels)}")
        if self.grid < 1:
            raise ShapeError("channel plan downsamples the image below one cell")
        b = self.proto_block
        if not 0 <= b < len(self.channels) or self.image_size // 2 ** (b + 1) != self.proto_size:
            raise ShapeError(f"no backbone block produces a {self.proto_size}x{self.proto_size} map")
        if self.cbam:
            if self.cbam_kernel % 2 == 0 or self.cbam_kernel < 1:
                raise ShapeError(f"CBAM kernel must be odd, got {self.cbam_kernel}")
            for c in self.channels:
                hidden_width(c, self.cbam_reduction)
        if self.num_classes < 1 or self.prototypes < 1:
            raise ShapeError("num_classes and prototypes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})


@dataclass
class RawOutput:
    cells: np.ndarray  # [S, S, 5 + K + P]
    prototypes: np.ndarray  # [P, h, w]


@dataclass
class PredictionRecord:
    class_id: int
    confidence: float
    box: np.ndarray  # normalized (cx, cy, w, h)
    mask: np.ndarray | None
    cell: int = 0


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


class Network:
    def __init__(self, config: NetConfig, params: dict[str, Parameter], cbams: list[CbamParams]):
        self.config = config
        self.params = params
        self.cbams = cbams

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def census(self) -> dict[str, int]:
        n = len(self.config.channels)
        return {"backbone_conv": n, "cbam": n if self.config.cbam else 0,
                "proto_conv": 2, "head_conv": 2}

    def layer_specs(self):
        """Layer graph in execution order for the complexity profiler."""
        from .profile import LayerSpec

        cfg = self.config
        specs = []
        c_prev = 3
        proto_src = None
        for i, c in enumerate(cfg.channels):
            specs.append(LayerSpec("conv", c_in=c_prev, c_out=c, kernel=3, stride=2, pad=1))
            specs.append(LayerSpec("activation"))
            if cfg.cbam:
                specs.append(LayerSpec("attention-cbam", c_in=c, reduction=cfg.cbam_reduction,
                                       kernel=cfg.cbam_kernel))
            if i == cfg.proto_block:
                proto_src = len(specs) - 1
            c_prev = c
        specs.append(LayerSpec("conv", c_in=c_prev, c_out=cfg.head_hidden, kernel=3, stride=1, pad=1))
        specs.append(LayerSpec("activation"))
        specs.append(LayerSpec("head", c_in=cfg.head_hidden, c_out=cfg.cell_dim))
        specs.append(LayerSpec("conv", c_in=cfg.channels[cfg.proto_block], c_out=cfg.proto_hidden,
                               kernel=3, stride=1, pad=1, source=proto_src))
        specs.append(LayerSpec("activation"))
        specs.append(LayerSpec("head", c_in=cfg.proto_hidden, c_out=cfg.prototypes))
        return specs

    # ------------------------------------------------------------ forward

    def forward_batch(self, images) -> tuple[Tensor, Tensor]:
        """images [N,3,S,S] -> (head [N, D, G, G], prototypes [N, P, h, w])."""
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        s = cfg.image_size
        if x.data.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"expected images of shape [N,3,{s},{s}], got {x.shape}")
        x = T.sub(T.mul(x, 2.0), 1.0)  # pixels [0,1] -> [-1,1]
        p = self.params
        proto_in = None
        for i in range(len(cfg.channels)):
            x = T.silu(T.conv2d(x, p[f"backbone.{i}.w"], p[f"backbone.{i}.b"], stride=2, pad=1))
            if cfg.cbam:
                x, _ = cbam_forward(x, self.cbams[i])
            if i == cfg.proto_block:
                proto_in = x
        h = T.silu(T.conv2d(x, p["head.0.w"], p["head.0.b"], stride=1, pad=1))
        head = T.conv2d(h, p["head.1.w"], p["head.1.b"])
        q = T.silu(T.conv2d(proto_in, p["proto.0.w"], p["proto.0.b"], stride=1, pad=1))
        protos = T.conv2d(q, p["proto.1.w"], p["proto.1.b"])
        return head, protos


def build_network(config: NetConfig, seed: int) -> Network:
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    cbams: list[CbamParams] = []

    def add(name, arr):
        params[name] = Parameter(arr, name)

    c_prev = 3
    for i, c in enumerate(config.channels):
        add(f"backbone.{i}.w", _he(rng, (c, c_prev, 3, 3), c_prev * 9))
        add(f"backbone.{i}.b", np.zeros(c))
        c_prev = c
    # head/prototype weights are drawn before the CBAM weights so the shared
    # layers initialize identically whether or not attention is enabled
    add("head.0.w", _he(rng, (config.head_hidden, c_prev, 3, 3), c_prev * 9))
    add("head.0.b", np.zeros(config.head_hidden))
    w = rng.normal(0.0, 0.01, (config.cell_dim, config.head_hidden, 1, 1))
    b = np.zeros(config.cell_dim)
    b[0] = config.obj_bias
    add("head.1.w", w)
    add("head.1.b", b)
    cp = config.channels[config.proto_block]
    add("proto.0.w", _he(rng, (config.proto_hidden, cp, 3, 3), cp * 9))
    add("proto.0.b", np.zeros(config.proto_hidden))
    add("proto.1.w", _he(rng, (config.prototypes, config.proto_hidden, 1, 1), config.proto_hidden))
    add("proto.1.b", np.zeros(config.prototypes))
    if config.cbam:
        for i, c in enumerate(config.channels):
            cb = CbamParams.init(c, config.cbam_reduction, config.cbam_kernel, rng, name=f"cbam.{i}")
            cbams.append(cb)
            for prm in cb.parameters():
                params[prm.name] = prm
    return Network(config, params, cbams)


def forward(net: Network, image) -> RawOutput:
    """Single image [3,S,S] -> RawOutput (cells channel-last)."""
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    s = net.config.image_size
    if img.shape != (3, s, s):
        raise ShapeError(f"expected image of shape [3,{s},{s}], got {img.shape}")
    head, protos = net.forward_batch(img[None])
    return RawOutput(head.data[0].transpose(1, 2, 0).copy(), protos.data[0].copy())


def forward_many(net: Network, images: np.ndarray) -> list[RawOutput]:
    head, protos = net.forward_batch(np.asarray(images, dtype=np.float64))
    return [RawOutput(head.data[i].transpose(1, 2, 0).copy(), protos.data[i].copy())
            for i in range(head.shape[0])]


# ---------------------------------------------------------------- decode / encode

def _sig(x):
    return T._sigmoid(np.asarray(x, dtype=np.float64))


def _logit(p):
    return math.log(p / (1.0 - p))


def encode_box(box_cxcywh, grid: int) -> tuple[int, int, np.ndarray]:
    """Cell (row, col) owning the box center and the logits that decode to it exactly."""
    cx, cy, w, h = (float(v) for v in box_cxcywh)
    col = min(int(cx * grid), grid - 1)
    row = min(int(cy * grid), grid - 1)
    fx = min(max(cx * grid - col, 1e-12), 1 - 1e-12)
    fy = min(max(cy * grid - row, 1e-12), 1 - 1e-12)
    return row, col, np.array([_logit(fx), _logit(fy), _logit(w), _logit(h)])


def box_in_pixels(box_cxcywh, size: int) -> np.ndarray:
    """Boolean [size,size] mask of pixel centers inside a normalized box."""
    x1, y1, x2, y2 = cxcywh_to_xyxy(box_cxcywh)
    centers = (np.arange(size) + 0.5) / size
    inx = (centers >= x1) & (centers <= x2)
    iny = (centers >= y1) & (centers <= y2)
    return iny[:, None] & inx[None, :]


def decode(raw: RawOutput, conf_threshold: float = 0.25, image_size: int | None = None,
           num_classes: int = 2) -> list[PredictionRecord]:
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must lie in [0,1], got {conf_threshold}")
    cells = raw.cells
    g = cells.shape[0]
    k = num_classes
    protos = raw.prototypes
    p_count, ph, pw = protos.shape
    size = image_size or ph * 4
    flat = cells.reshape(g * g, -1)
    obj = _sig(flat[:, 0])
    logits = flat[:, 5:5 + k]
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    cls = probs.argmax(axis=1)
    conf = np.clip(obj * probs[np.arange(g * g), cls], 0.0, 1.0)
    keep = np.nonzero(conf >= conf_threshold)[0]
    order = keep[np.argsort(-conf[keep], kind="stable")]
    sig_xy = _sig(flat[:, 1:5])
    rows, cols = np.divmod(np.arange(g * g), g)
    out = []
    for idx in order:
        box = np.array([(cols[idx] + sig_xy[idx, 0]) / g, (rows[idx] + sig_xy[idx, 1]) / g,
                        sig_xy[idx, 2], sig_xy[idx, 3]])
        box = np.clip(box, 0.0, 1.0)
        coeff = flat[idx, 5 + k:5 + k + p_count]
        m = _sig(np.tensordot(coeff, protos, axes=1))
        up = np.repeat(np.repeat(m, size // ph, axis=0), size // pw, axis=1) > 0.5
        up &= box_in_pixels(box, size)
        out.append(PredictionRecord(int(cls[idx]), float(conf[idx]), box, up, int(idx)))
    return out


def nms(preds: list[PredictionRecord], iou_threshold: float = 0.5) -> list[PredictionRecord]:
    """Greedy per-class suppression; ``preds`` must be sorted by confidence."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0,1], got {iou_threshold}")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].cell, i))
    kept: list[PredictionRecord] = []
    for i in order:
        p = preds[i]
        bp = cxcywh_to_xyxy(p.box)
        if all(q.class_id != p.class_id or iou_box(bp, cxcywh_to_xyxy(q.box)) <= iou_threshold
               for q in kept):
            kept.append(p)
    return kept


def predictions_to_records(preds: list[PredictionRecord]) -> list[InstanceRecord]:
    """Convert decoded masks to polygon records for prediction files."""
    from .labels import mask_to_polygon

    out = []
    for p in preds:
        poly = mask_to_polygon(p.mask) if p.mask is not None else None
        if poly is None:
            continue
        out.append(InstanceRecord(p.class_id, poly, p.confidence))
    return out


# ---------------------------------------------------------------- targets and loss

@dataclass
class Targets:
    """Per-batch training targets, flattened over (image, row, col)."""
    obj: np.ndarray  # [N*G*G]
    rows: np.ndarray  # flat indices of assigned cells
    image_index: np.ndarray
    boxes: np.ndarray  # [M, 4] cx, cy, w, h
    cell_rc: np.ndarray  # [M, 2]
    classes: np.ndarray
    masks: np.ndarray  # [M, h*w] at prototype resolution
    crop: np.ndarray  # [M, h*w] loss weight per pixel
    skipped: int = 0


def assign_targets(records, config: NetConfig) -> tuple[list[tuple[int, int, InstanceRecord]], int]:
    """One target per cell, larger boxes first; zero-area boxes are skipped."""
    g = config.grid
    skipped = 0
    cand = []
    for i, rec in enumerate(records):
        x1, y1, x2, y2 = rec.box
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            skipped += 1
            continue
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        cand.append(((x2 - x1) * (y2 - y1), i, min(int(cy * g), g - 1), min(int(cx * g), g - 1), rec))
    cand.sort(key=lambda t: (-t[0], t[1]))
    taken = set()
    out = []
    for _, _, r, c, rec in cand:
        if (r, c) in taken:
            continue
        taken.add((r, c))
        out.append((r, c, rec))
    return out, skipped


def build_targets(batch_records, config: NetConfig) -> Targets:
    g = config.grid
    ps = config.proto_size
    n = len(batch_records)
    obj = np.zeros(n * g * g)
    rows, img_idx, boxes, rc, classes, masks, crops = [], [], [], [], [], [], []
    skipped = 0
    for b, records in enumerate(batch_records):
        assigned, sk = assign_targets(records, config)
        skipped += sk
        for r, c, rec in assigned:
            flat = b * g * g + r * g + c
            obj[flat] = 1.0
            rows.append(flat)
            img_idx.append(b)
            x1, y1, x2, y2 = rec.box
            box = np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])
            boxes.append(box)
            rc.append((r, c))
            classes.append(rec.class_id)
            masks.append(rec.mask(ps, ps).reshape(-1).astype(np.float64))
            crop = box_in_pixels(box, ps).reshape(-1).astype(np.float64)
            crops.append(crop / max(crop.sum(), 1.0))
    m = len(rows)
    hw = ps * ps
    return Targets(obj, np.array(rows, dtype=np.int64), np.array(img_idx, dtype=np.int64),
                   np.array(boxes).reshape(m, 4), np.array(rc, dtype=np.int64).reshape(m, 2),
                   np.array(classes, dtype=np.int64), np.array(masks).reshape(m, hw),
                   np.array(crops).reshape(m, hw), skipped)


def compute_loss(head: Tensor, protos: Tensor, targets: Targets, config: NetConfig) -> Tensor:
    """Weighted sum of four mean-reduced terms.

    Objectness BCE is averaged over every cell of the batch; box squared error,
    class cross-entropy and the box-cropped mask BCE are averaged over assigned
    targets, so each term is per-cell or per-object and the weights compare them.
    """
    n, d, g, _ = head.shape
    k = config.num_classes
    p_count = config.prototypes
    w_obj, w_box, w_cls, w_mask = config.loss_weights
    cells = T.reshape(T.transpose(head, (0, 2, 3, 1)), (n * g * g, d))
    obj = T.bce_with_logits(T.take(cells, (slice(None), 0)), targets.obj)
    loss = T.mul(obj, w_obj / (n * g * g))
    m = len(targets.rows)
    if m:
        sel = T.take(cells, targets.rows)
        s = T.sigmoid(T.take(sel, (slice(None), slice(1, 5))))
        offs = np.zeros((m, 4))
        offs[:, 0] = targets.cell_rc[:, 1]
        offs[:, 1] = targets.cell_rc[:, 0]
        scale = np.array([1.0 / g, 1.0 / g, 1.0, 1.0])
        decoded = T.mul(T.add(s, offs), scale)
        box = T.tsum(T.square(T.sub(decoded, targets.boxes)))
        cls = T.cross_entropy(T.take(sel, (slice(None), slice(5, 5 + k))), targets.classes)
        coeff = T.take(sel, (slice(None), slice(5 + k, 5 + k + p_count)))
        ph, pw = protos.shape[2:]
        hw = ph * pw
        proto_mat = T.reshape(T.transpose(protos, (1, 0, 2, 3)), (p_count, n * hw))
        logits = T.matmul(coeff, proto_mat)  # [M, N*hw]; only each target's own image is weighted
        weight = np.zeros((m, n * hw))
        target = np.zeros((m, n * hw))
        for j in range(m):
            b = targets.image_index[j]
            weight[j, b * hw:(b + 1) * hw] = targets.crop[j]
            target[j, b * hw:(b + 1) * hw] = targets.masks[j]
        mask = T.bce_with_logits(logits, target, weight)
        loss = loss + T.mul(box, w_box / m) + T.mul(cls, w_cls / m) + T.mul(mask, w_mask / m)
    return loss


def loss_for_records(net: Network, images: np.ndarray, batch_records) -> Tensor:
    head, protos = net.forward_batch(images)
    return compute_loss(head, protos, build_targets(batch_records, net.config), net.config)


# ---------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray], history: list):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    ms_preprocess: float
    ms_forward: float
    ms_backward: float


def _batches(data, order, size):
    for start in range(0, len(order), size):
        idx = order[start:start + size]
        yield np.stack([data[i][0] for i in idx]), [data[i][1] for i in idx]


def evaluate_loss(net: Network, data, batch_size: int) -> float:
    total, count = 0.0, 0
    for images, recs in _batches(data, np.arange(len(data)), batch_size):
        loss = loss_for_records(net, images, recs)
        total += loss.item() * len(recs)
        count += len(recs)
    return total / max(count, 1)


def train(net: Network, train_data, val_data, epochs: int, seed: int, early_stop_patience: int,
          progress=None) -> tuple[dict[str, np.ndarray], list[EpochStats]]:
    """SGD with momentum and early stopping on validation loss.

    ``train_data``/``val_data`` are sequences of ``(image [3,S,S], records)``.
    The network ends up holding (and the call returns) the parameters of the
    epoch with the lowest validation loss.
    """
    if epochs < 0 or epochs > 500:
        raise ValueError(f"epochs must lie in [0, 500], got {epochs}")
    if epochs == 0:
        return net.state(), []
    if not train_data or not val_data:
        raise ValueError("training needs nonempty train and validation splits")
    cfg = net.config
    params = net.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    history: list[EpochStats] = []
    best = (math.inf, net.state())
    since_best = 0
    for epoch in range(1, epochs + 1):
        t_pre = t_fwd = t_bwd = 0.0
        running, seen = 0.0, 0
        order = rng.permutation(len(train_data))
        last_good = net.state()
        for start in range(0, len(order), cfg.batch_size):
            t0 = time.perf_counter()
            idx = order[start:start + cfg.batch_size]
            images = np.stack([train_data[i][0] for i in idx])
            recs = [train_data[i][1] for i in idx]
            targets = build_targets(recs, cfg)
            t1 = time.perf_counter()
            head, protos = net.forward_batch(images)
            loss = compute_loss(head, protos, targets, cfg)
            t2 = time.perf_counter()
            value = loss.item()
            if not math.isfinite(value):
                net.load_state(last_good)
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", last_good, history)
            T.zero_grads(params)
            T.backward(loss)
            scale = 1.0
            if cfg.grad_clip > 0:
                norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
                if norm > cfg.grad_clip:
                    scale = cfg.grad_clip / norm
            for p, v in zip(params, velocity):
                v *= cfg.momentum
                v -= cfg.lr * (scale * p.grad + cfg.weight_decay * p.data)
                p.data += v
            t3 = time.perf_counter()
            t_pre += t1 - t0
            t_fwd += t2 - t1
            t_bwd += t3 - t2
            running += value * len(idx)
            seen += len(idx)
        val = evaluate_loss(net, val_data, cfg.batch_size)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", best[1], history)
        n_img = max(seen, 1)
        stats = EpochStats(epoch, running / n_img, val, 1e3 * t_pre / n_img,
                           1e3 * t_fwd / n_img, 1e3 * t_bwd / n_img)
        history.append(stats)
        if progress is not None:
            progress(stats)
        if val < best[0]:
            best = (val, net.state())
            since_best = 0
        else:
            since_best += 1
            if since_best >= early_stop_patience:
                log.info("early stop at epoch %d (best val %.5f)", epoch, best[0])
                break
    net.load_state(best[1])
    return best[1], history


def history_csv(history: list[EpochStats]) -> str:
    lines = ["epoch,train_loss,val_loss,ms_preprocess,ms_forward,ms_backward"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.ms_preprocess:.3f},"
                     f"{h.ms_forward:.3f},{h.ms_backward:.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"CBSGCKPT1\n"


def save_checkpoint(path, net: Network, extra: dict | None = None) -> None:
    names = list(net.params)
    header = json.dumps({"config": net.config.to_dict(), "params": names, "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(f"{len(header)}\n".encode())
        fh.write(header)
        for name in names:
            fh.write(T.tensor_to_bytes(net.params[name].data))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_CKPT_MAGIC)
    nl = buf.index(b"\n", pos)
    size = int(buf[pos:nl])
    try:
        header = json.loads(buf[nl + 1:nl + 1 + size])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt checkpoint header ({exc})") from None
    pos = nl + 1 + size
    config = NetConfig.from_dict(header["config"])
    net = build_network(config, seed=0)
    state = {}
    for name in header["params"]:
        arr, pos = T.tensor_from_bytes(buf, pos)
        state[name] = arr
    if set(state) != set(net.params):
        raise ValueError(f"{path}: parameter set does not match its config")
    net.load_state(state)
    return net


def read_checkpoint_config(path) -> NetConfig:
    with open(path, "rb") as fh:
        buf = fh.read(1 << 16)
    if not buf.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_CKPT_MAGIC)
    nl = buf.index(b"\n", pos)
    size = int(buf[pos:nl])
    return NetConfig.from_dict(json.loads(buf[nl + 1:nl + 1 + size])["config"])
