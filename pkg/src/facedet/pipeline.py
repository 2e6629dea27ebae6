"""End-to-end orchestration: pretrain -> mine hard negatives -> finetune with
multi-scale + feature concatenation -> detect -> evaluate, plus the
seven-row ablation grid."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .anchors import (AnchorConfig, decode_deltas, encode_deltas, feature_map_size,
                      generate_anchor_array, label_anchors, select_proposals,
                      LABEL_POSITIVE, LABEL_NEGATIVE)
from .data import ImageRecord, SynthConfig
from .featconcat import ConcatConfig, FeatureConcatHead, roi_pool
from .fddb_eval import EvalReport, box_to_ellipse, emit_comparison, evaluate
from .geometry import BBox, ScoredRegion, boxes_to_array, clip_box
from .net import (Backbone, BackboneSpec, Conv2d, Linear, Module, clip_gradients,
                  load_into, save_weights, sgd_step, smooth_l1_loss, softmax_ce_loss)
from .sampling import (HardNegative, RoiSample, inject_hard_negatives,
                       mine_hard_negatives, sample_rois)
from .scaling import ScalePolicy, choose_scale, hflip, resize_image, scale_record
from .tensor import Tensor

# Full-scale reference values, kept for documentation; desk-scale defaults
# below replace them.
FULL_SCALE_REFERENCE = {
    "pretrain_iterations": 110_000,
    "pretrain_lr": 0.0001,
    "mining_iterations": 100_000,
    "mining_lr": 0.0001,
    "finetune_iterations": 40_000,
    "finetune_lr": 0.001,
    "anchor_sizes": [64, 128, 256, 512],
    "blob_norm": 4700.0,
}


@dataclass(frozen=True)
class SamplingConfig:
    fg_iou: float = 0.5
    fg_fraction: float = 0.25
    batch: int = 24

    def __post_init__(self):
        if not (0.0 <= self.fg_iou <= 1.0 and 0.0 <= self.fg_fraction <= 1.0):
            raise ValueError("sampling thresholds must lie in [0,1]")
        if self.batch < 4:
            raise ValueError(f"sampling batch must be >= 4: {self.batch}")


@dataclass(frozen=True)
class MiningConfig:
    score_thr: float = 0.8
    iou_thr: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.score_thr <= 1.0 and 0.0 <= self.iou_thr <= 1.0):
            raise ValueError("mining thresholds must lie in [0,1]")


@dataclass(frozen=True)
class DetectionConfig:
    pre_nms_train: int = 2000
    post_nms_train: int = 2000  # proposals kept during training
    pre_nms_test: int = 300
    post_nms_test: int = 100  # proposals generated at test time
    score_thr: float = 0.8
    nms_thr: float = 0.3
    export_floor: float = 0.001

    def __post_init__(self):
        for v in (self.score_thr, self.nms_thr, self.export_floor):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"detection threshold outside [0,1]: {v}")
        if not (self.pre_nms_train >= self.post_nms_train >= 1
                and self.pre_nms_test >= self.post_nms_test >= 1):
            raise ValueError("proposal counts must satisfy pre >= post >= 1")


@dataclass(frozen=True)
class RpnConfig:
    pos_thr: float = 0.7
    neg_thr: float = 0.3
    batch: int = 48
    fg_fraction: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.neg_thr <= self.pos_thr <= 1.0):
            raise ValueError("need 0 <= neg_thr <= pos_thr <= 1")


@dataclass(frozen=True)
class TrainerConfig:
    pretrain_iterations: int = 600
    finetune_iterations: int = 600
    pretrain_lr: float = 0.05
    finetune_lr: float = 0.02
    box_loss_weight: float = 1.0  # RPN-vs-head weighting left at 1.0
    grad_clip: float = 10.0
    head_hidden: int = 64

    def __post_init__(self):
        if self.pretrain_iterations < 1 or self.finetune_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    backbone: BackboneSpec = BackboneSpec()
    anchors: AnchorConfig = AnchorConfig(sizes=(16.0, 24.0, 36.0, 54.0), ratios=(1.0, 2.0, 0.5), stride=16)
    concat: ConcatConfig = ConcatConfig(taps=(0, 1, 2), pooled=7, target_norm=4700.0, output_channels=32)
    pretrain_policy: ScalePolicy = ScalePolicy(targets=(128.0,), cap=214.0)
    finetune_policy: ScalePolicy = ScalePolicy(targets=(102.0, 128.0, 160.0), cap=267.0)
    test_policy: ScalePolicy = ScalePolicy(targets=(128.0,), cap=214.0)
    sampling: SamplingConfig = SamplingConfig()
    rpn: RpnConfig = RpnConfig()
    mining: MiningConfig = MiningConfig()
    detection: DetectionConfig = DetectionConfig()
    trainer: TrainerConfig = TrainerConfig()
    synth: SynthConfig = SynthConfig()
    use_pretrain: bool = True
    use_mining: bool = True
    use_concat: bool = True
    use_multiscale: bool = True
    flip_prob: float = 0.5
    full_scale_reference: dict = field(default_factory=lambda: dict(FULL_SCALE_REFERENCE))


_NESTED = {
    "backbone": BackboneSpec,
    "anchors": AnchorConfig,
    "concat": ConcatConfig,
    "pretrain_policy": ScalePolicy,
    "finetune_policy": ScalePolicy,
    "test_policy": ScalePolicy,
    "sampling": SamplingConfig,
    "rpn": RpnConfig,
    "mining": MiningConfig,
    "detection": DetectionConfig,
    "trainer": TrainerConfig,
    "synth": SynthConfig,
}

_TUPLE_FIELDS = {"sizes", "ratios", "taps", "channels", "downsamples", "targets"}


def _build(cls, payload: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ValueError(f"unknown config keys at {path}: {sorted(unknown)}")
    kwargs = {}
    for k, v in payload.items():
        if k in _TUPLE_FIELDS and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(payload: dict) -> PipelineConfig:
    """Build a validated PipelineConfig from a JSON-style dict; unknown keys
    and out-of-range values raise ValueError."""
    names = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(payload) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in payload.items():
        if k in _NESTED:
            if not isinstance(v, dict):
                raise ValueError(f"config key {k} must be an object")
            kwargs[k] = _build(_NESTED[k], v, k)
        else:
            kwargs[k] = v
    return PipelineConfig(**kwargs)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


# -- model ---------------------------------------------------------------------


class FaceDetector(Module):
    """Toy two-stage detector: multi-stride backbone, anchor RPN on the
    deepest tap, and a classification/regression head fed either by the
    feature-concatenation path or by plain single-tap RoI pooling."""

    def __init__(self, cfg: PipelineConfig, rng: np.random.Generator):
        self.cfg = cfg
        spec = cfg.backbone
        self.backbone = Backbone(spec, 1, rng)
        c_last = spec.channels[-1]
        a = cfg.anchors.per_location
        self.rpn_conv = Conv2d(c_last, c_last, 3, rng, padding=1)
        self.rpn_cls = Conv2d(c_last, 2 * a, 1, rng)
        self.rpn_reg = Conv2d(c_last, 4 * a, 1, rng, gain=0.1)
        self.concat_head: FeatureConcatHead | None = None
        if cfg.use_concat:
            tap_channels = [spec.channels[t] for t in spec.taps]
            self.concat_head = FeatureConcatHead(cfg.concat, tap_channels, rng)
            head_c = cfg.concat.output_channels
        else:
            head_c = c_last
        pooled = cfg.concat.pooled
        self.fc1 = Linear(head_c * pooled * pooled, cfg.trainer.head_hidden, rng)
        self.cls = Linear(cfg.trainer.head_hidden, 2, rng)
        self.reg = Linear(cfg.trainer.head_hidden, 4, rng, gain=0.1)

    # -- forward pieces -------------------------------------------------
    def taps(self, image: Tensor) -> list[tuple[Tensor, int]]:
        return self.backbone(image)

    def rpn_forward(self, taps: list[tuple[Tensor, int]]) -> tuple[Tensor, Tensor, tuple[int, int]]:
        """Per-anchor logits (N,2) and deltas (N,4) in anchor-grid order."""
        fmap, _stride = taps[-1]
        h, w = fmap.shape[2], fmap.shape[3]
        a = self.cfg.anchors.per_location
        x = T.relu(self.rpn_conv(fmap))
        logits = self.rpn_cls(x)  # (1, 2A, H, W)
        deltas = self.rpn_reg(x)  # (1, 4A, H, W)
        logits = T.transpose(T.reshape(logits, (a, 2, h, w)), (2, 3, 0, 1))
        logits = T.reshape(logits, (h * w * a, 2))
        deltas = T.transpose(T.reshape(deltas, (a, 4, h, w)), (2, 3, 0, 1))
        deltas = T.reshape(deltas, (h * w * a, 4))
        return logits, deltas, (w, h)

    def roi_features(self, taps: list[tuple[Tensor, int]], rois: list[BBox]) -> Tensor:
        if self.concat_head is not None:
            return self.concat_head(taps, rois)
        pooled = self.cfg.concat.pooled
        fmap, stride = taps[-1]
        return T.concat([roi_pool(fmap, stride, r, pooled) for r in rois], axis=0)

    def head_forward(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        n = feats.shape[0]
        h = T.relu(self.fc1(T.reshape(feats, (n, -1))))
        return self.cls(h), self.reg(h)

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        save_weights(path, {k: v.data for k, v in self.parameters().items()})

    def load(self, path) -> None:
        load_into(self, path)


def anchor_grid(cfg: PipelineConfig, img_w: int, img_h: int) -> np.ndarray:
    fw, fh = feature_map_size(img_w, img_h, cfg.anchors.stride)
    return generate_anchor_array(cfg.anchors, fw, fh)


def _proposals_from_rpn(model: FaceDetector, logits: Tensor, deltas: Tensor,
                        anchors_arr: np.ndarray, img_w: float, img_h: float,
                        pre_nms: int, post_nms: int) -> list[ScoredRegion]:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    scores = e[:, 1] / e.sum(axis=1)
    boxes = decode_deltas(anchors_arr, deltas.data)
    scored = []
    for i in range(len(boxes)):
        b = clip_box(BBox(*boxes[i]), img_w, img_h)
        if b.width < 2.0 or b.height < 2.0:
            continue
        scored.append(ScoredRegion(b, float(scores[i])))
    if not scored:
        return []
    return select_proposals(scored, pre_nms, model.cfg.detection.nms_thr, post_nms)


def _transform_hards(hards: list[HardNegative], factor: float, flipped: bool,
                     width: float) -> list[HardNegative]:
    """Map harvested hard negatives (original frame) into the train frame."""
    out = []
    for h in hards:
        b = BBox(h.roi.x1 * factor, h.roi.y1 * factor, h.roi.x2 * factor, h.roi.y2 * factor)
        if flipped:
            b = BBox(width - b.x2, b.y1, width - b.x1, b.y2)
        out.append(HardNegative(b, h.score, h.image_id))
    return out


@dataclass
class TrainState:
    losses: list[float] = field(default_factory=list)
    fg_bg_counts: list[tuple[int, int]] = field(default_factory=list)


def train_step(model: FaceDetector, record: ImageRecord, image: Tensor,
               policy: ScalePolicy, rng: np.random.Generator,
               hards: list[HardNegative] | None = None,
               lr: float = 0.01, state: TrainState | None = None) -> float:
    """One SGD step on one image: joint RPN + head loss."""
    cfg = model.cfg
    factor = choose_scale(record.width, record.height, policy, rng)
    img = resize_image(image, factor)
    rec = scale_record(record, factor)
    rec = replace(rec, width=float(img.shape[3]), height=float(img.shape[2]))
    flipped = bool(rng.uniform() < cfg.flip_prob)
    if flipped:
        img, rec = hflip(img, rec)
    step_hards = _transform_hards(hards or [], factor, flipped, rec.width)

    gt_boxes = [a.region for a in rec.annotations if isinstance(a.region, BBox)]
    img_h, img_w = img.shape[2], img.shape[3]
    taps = model.taps(img)
    logits, deltas, _ = model.rpn_forward(taps)
    anchors_arr = anchor_grid(cfg, img_w, img_h)

    labels, matched = label_anchors(anchors_arr, boxes_to_array(gt_boxes),
                                    cfg.rpn.pos_thr, cfg.rpn.neg_thr)
    pos = np.flatnonzero(labels == LABEL_POSITIVE)
    neg = np.flatnonzero(labels == LABEL_NEGATIVE)
    n_pos = min(len(pos), int(cfg.rpn.batch * cfg.rpn.fg_fraction))
    n_neg = min(len(neg), cfg.rpn.batch - n_pos)
    sel_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else np.array([], dtype=int)
    sel_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else np.array([], dtype=int)
    sel = np.concatenate([sel_pos, sel_neg]).astype(int)

    loss = None
    if len(sel):
        rpn_labels = (labels[sel] == LABEL_POSITIVE).astype(np.int64)
        loss = softmax_ce_loss(T.getitem(logits, sel), rpn_labels)
    if len(sel_pos) and gt_boxes:
        targets = encode_deltas(anchors_arr[sel_pos],
                                boxes_to_array(gt_boxes)[matched[sel_pos]])
        rpn_box = smooth_l1_loss(T.getitem(deltas, sel_pos.astype(int)), targets)
        loss = rpn_box * cfg.trainer.box_loss_weight if loss is None else loss + rpn_box * cfg.trainer.box_loss_weight

    proposals = _proposals_from_rpn(model, logits, deltas, anchors_arr, img_w, img_h,
                                    cfg.detection.pre_nms_train, cfg.detection.post_nms_train)
    cand = [p.region for p in proposals] + gt_boxes  # gt boxes seed the fg pool
    samples = sample_rois(cand, gt_boxes, cfg.sampling.fg_iou, cfg.sampling.batch,
                          cfg.sampling.fg_fraction, rng)
    if step_hards:
        samples = inject_hard_negatives(samples, step_hards, cfg.sampling.batch, rng)
    samples = [s for s in samples if s.roi.width >= 2.0 and s.roi.height >= 2.0]
    if samples:
        rois = [s.roi for s in samples]
        feats = model.roi_features(taps, rois)
        cls_logits, reg_out = model.head_forward(feats)
        head_labels = np.array([1 if s.is_foreground else 0 for s in samples], dtype=np.int64)
        head_cls = softmax_ce_loss(cls_logits, head_labels)
        loss = head_cls if loss is None else loss + head_cls
        targets = np.zeros((len(samples), 4))
        weights = np.zeros((len(samples), 4))
        for i, s in enumerate(samples):
            if s.is_foreground:
                targets[i] = (s.target.tx, s.target.ty, s.target.tw, s.target.th)
                weights[i] = 1.0
        if weights.any():
            head_box = smooth_l1_loss(reg_out, targets, weights)
            loss = loss + head_box * cfg.trainer.box_loss_weight
        if state is not None:
            fg = int(head_labels.sum())
            state.fg_bg_counts.append((fg, len(samples) - fg))

    if loss is None:
        return 0.0
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss: {value}")
    model.zero_grad()
    loss.backward()
    params = model.parameters()
    clip_gradients(params, cfg.trainer.grad_clip)
    sgd_step(params, lr)
    return value


def _train_loop(model: FaceDetector, dataset, policy: ScalePolicy, iterations: int,
                lr: float, rng: np.random.Generator,
                hard_store: dict[str, list[HardNegative]] | None = None,
                state: TrainState | None = None) -> None:
    for it in range(iterations):
        rec, img = dataset[int(rng.integers(len(dataset)))]
        hards = hard_store.get(rec.image_id) if hard_store else None
        try:
            value = train_step(model, rec, img, policy, rng, hards, lr, state)
        except FloatingPointError as e:
            raise FloatingPointError(f"training diverged at iteration {it}: {e}") from e
        if state is not None:
            state.losses.append(value)


def stage_pretrain(cfg: PipelineConfig, dataset, rng: np.random.Generator,
                   model: FaceDetector | None = None,
                   checkpoint_path=None, state: TrainState | None = None) -> FaceDetector:
    """Joint RPN+head training at the fixed pretrain scale policy."""
    if model is None:
        model = FaceDetector(cfg, rng)
    _train_loop(model, dataset, cfg.pretrain_policy, cfg.trainer.pretrain_iterations,
                cfg.trainer.pretrain_lr, rng, state=state)
    if checkpoint_path:
        model.save(checkpoint_path)
    return model


def detect_image(model: FaceDetector, image: Tensor, record: ImageRecord,
                 export: bool = False) -> list[ScoredRegion]:
    """Full test-time path; boxes are returned in original image coordinates."""
    cfg = model.cfg
    rng = np.random.default_rng(0)  # test policy has one target; rng is vestigial
    factor = choose_scale(record.width, record.height, cfg.test_policy, rng)
    img = resize_image(image, factor)
    img_h, img_w = img.shape[2], img.shape[3]
    taps = model.taps(img)
    logits, deltas, _ = model.rpn_forward(taps)
    anchors_arr = anchor_grid(cfg, img_w, img_h)
    proposals = _proposals_from_rpn(model, logits, deltas, anchors_arr, img_w, img_h,
                                    cfg.detection.pre_nms_test, cfg.detection.post_nms_test)
    if not proposals:
        return []
    rois = [p.region for p in proposals]
    feats = model.roi_features(taps, rois)
    cls_logits, reg_out = model.head_forward(feats)
    z = cls_logits.data - cls_logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e[:, 1] / e.sum(axis=1)
    floor = cfg.detection.export_floor if export else cfg.detection.score_thr
    refined = decode_deltas(boxes_to_array(rois), reg_out.data)
    dets = []
    for i in range(len(rois)):
        if probs[i] <= floor:
            continue
        b = clip_box(BBox(*refined[i]), img_w, img_h)
        if b.area <= 0:
            continue
        dets.append(ScoredRegion(b, float(probs[i])))
    from .geometry import nms as _nms

    kept = _nms(dets, cfg.detection.nms_thr)
    out = []
    for i in kept:
        b = dets[i].region
        orig = clip_box(BBox(b.x1 / factor, b.y1 / factor, b.x2 / factor, b.y2 / factor),
                        record.width, record.height)
        if orig.area > 0:
            out.append(ScoredRegion(orig, dets[i].score))
    return out


def stage_mine(model: FaceDetector, dataset, store_path=None) -> dict[str, list[HardNegative]]:
    """Detect over the training corpus and harvest confident false alarms."""
    cfg = model.cfg
    store: dict[str, list[HardNegative]] = {}
    for rec, img in dataset:
        dets = detect_image(model, img, rec)
        gts = [a.region for a in rec.annotations if isinstance(a.region, BBox)]
        hards = mine_hard_negatives(dets, gts, rec.image_id,
                                    cfg.mining.score_thr, cfg.mining.iou_thr)
        if hards:
            store[rec.image_id] = hards
    if store_path:
        from .sampling import append_hard_negatives

        open(store_path, "w").close()
        for hards in store.values():
            append_hard_negatives(store_path, hards)
    return store


def stage_finetune(model: FaceDetector, dataset,
                   hard_store: dict[str, list[HardNegative]] | None,
                   rng: np.random.Generator,
                   checkpoint_path=None, state: TrainState | None = None) -> FaceDetector:
    """Training with the multi-scale policy (when enabled) and injected
    hard negatives."""
    cfg = model.cfg
    policy = cfg.finetune_policy if cfg.use_multiscale else cfg.pretrain_policy
    _train_loop(model, dataset, policy, cfg.trainer.finetune_iterations,
                cfg.trainer.finetune_lr, rng, hard_store=hard_store, state=state)
    if checkpoint_path:
        model.save(checkpoint_path)
    return model


def detect_dataset(model: FaceDetector, dataset, export: bool = False
                   ) -> list[tuple[str, list[ScoredRegion]]]:
    out = []
    for rec, img in sorted(dataset, key=lambda p: p[0].image_id):
        out.append((rec.image_id, detect_image(model, img, rec, export=export)))
    return out


def evaluate_detections(per_image: list[tuple[str, list[ScoredRegion]]],
                        dataset, as_ellipses: bool = False) -> EvalReport:
    by_id = {rec.image_id: rec for rec, _ in dataset}
    pairs = []
    for name, dets in per_image:
        rec = by_id[name]
        if as_ellipses:
            dets = [ScoredRegion(box_to_ellipse(d.region), d.score) for d in dets]
        pairs.append((dets, list(rec.annotations)))
    return evaluate(pairs)


# -- ablation grid --------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    id: int
    n_anchors: int  # 9 or 12
    pretrain: bool
    mining: bool
    concat: bool
    multiscale: bool


TABLE2_ROWS: tuple[AblationRow, ...] = (
    AblationRow(1, 9, False, False, False, False),
    AblationRow(2, 12, False, False, False, False),
    AblationRow(3, 12, False, False, True, False),
    AblationRow(4, 12, True, False, False, False),
    AblationRow(5, 12, True, True, False, False),
    AblationRow(6, 12, True, True, True, False),
    AblationRow(7, 12, True, True, True, True),
)


def config_for_row(base: PipelineConfig, row: AblationRow) -> PipelineConfig:
    """Apply one grid row's flags; the 9-anchor variant drops the smallest
    size group (the 12-anchor grid adds it)."""
    anchors = base.anchors
    if row.n_anchors == 9:
        anchors = replace(anchors, sizes=base.anchors.sizes[1:])
    elif row.n_anchors != 12:
        raise ValueError(f"unsupported anchor count: {row.n_anchors}")
    return replace(base, anchors=anchors, use_pretrain=row.pretrain,
                   use_mining=row.mining, use_concat=row.concat,
                   use_multiscale=row.multiscale)


@dataclass
class RunResult:
    model: FaceDetector
    report: EvalReport
    detections: list[tuple[str, list[ScoredRegion]]]
    pre_finetune_detections: list[tuple[str, list[ScoredRegion]]] | None = None
    hard_store: dict[str, list[HardNegative]] | None = None


def run_pipeline(cfg: PipelineConfig, pretrain_set, train_set, test_set,
                 out_dir=None) -> RunResult:
    """Execute the configured stages end to end and evaluate on test_set."""
    rng = np.random.default_rng(cfg.seed)
    model = FaceDetector(cfg, rng)
    if cfg.use_pretrain:
        stage_pretrain(cfg, pretrain_set, rng, model=model,
                       checkpoint_path=os.path.join(out_dir, "pretrained.fdw") if out_dir else None)
    else:
        stage_pretrain(cfg, train_set, rng, model=model)
    pre_dets = detect_dataset(model, test_set)
    hard_store = None
    if cfg.use_mining:
        store_path = os.path.join(out_dir, "hard_negatives.jsonl") if out_dir else None
        hard_store = stage_mine(model, train_set, store_path)
    stage_finetune(model, train_set, hard_store, rng,
                   checkpoint_path=os.path.join(out_dir, "final.fdw") if out_dir else None)
    dets = detect_dataset(model, test_set, export=True)
    report = evaluate_detections(dets, test_set)
    return RunResult(model, report, dets, pre_dets, hard_store)


def run_ablation(rows, base_cfg: PipelineConfig, pretrain_set, train_set, test_set,
                 out_dir=None) -> dict[int, RunResult]:
    """Run the grid end to end; emits a comparison CSV/SVG when out_dir is set."""
    results: dict[int, RunResult] = {}
    for row in rows:
        cfg = config_for_row(base_cfg, row)
        row_dir = os.path.join(out_dir, f"row_{row.id}") if out_dir else None
        if row_dir:
            os.makedirs(row_dir, exist_ok=True)
        results[row.id] = run_pipeline(cfg, pretrain_set, train_set, test_set, row_dir)
    if out_dir:
        emit_comparison({f"id{row_id}": res.report for row_id, res in results.items()}, out_dir)
    return results
