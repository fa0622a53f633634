"""Online distillation: label generation, the bounded per-frame adaptation
loop, and the exponential back-off teacher scheduler.

The stream loop consults the teacher only on frames whose index is a
multiple of the current stride ``delta``.  On a teacher frame the student is
trained against the rasterized teacher output until it clears the accuracy
threshold or exhausts the per-frame update budget; the stride then doubles
after a passing check and halves otherwise, clamped to
``[delta_min, delta_max]``.  Every other frame runs student inference only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import JITNet
from .metrics import IGNORE_LABEL, mean_iou
from .nn import SGDMomentum, weighted_softmax_cross_entropy


class TeacherError(RuntimeError):
    """A teacher failed to produce predictions for a frame."""

    def __init__(self, frame_index: int, reason: str = "unavailable"):
        super().__init__(f"teacher failed on frame {frame_index}: {reason}")
        self.frame_index = frame_index


class StreamNumericError(RuntimeError):
    """Student inference produced non-finite values; the run cannot continue."""

    def __init__(self, frame_index: int):
        super().__init__(f"non-finite student output on frame {frame_index}")
        self.frame_index = frame_index


@dataclass
class TeacherInstance:
    """One predicted object: class, confidence, half-open pixel box and a
    binary mask aligned either to the box or to the full frame."""

    class_id: int
    confidence: float
    bbox: tuple[int, int, int, int]          # (x0, y0, x1, y1), half-open
    mask: np.ndarray                          # bool, bbox-aligned or full-frame

    def clamped(self, frame_hw: tuple[int, int]) -> "TeacherInstance | None":
        """Clip to frame bounds; returns None if nothing visible remains."""
        h, w = frame_hw
        x0, y0, x1, y1 = self.bbox
        cx0, cy0 = max(0, x0), max(0, y0)
        cx1, cy1 = min(w, x1), min(h, y1)
        if cx0 >= cx1 or cy0 >= cy1:
            return None
        if self.mask.shape == (h, w):
            mask = self.mask
        elif self.mask.shape == (y1 - y0, x1 - x0):
            mask = self.mask[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
        else:
            raise ValueError(f"mask extent {self.mask.shape} matches neither frame "
                             f"({h},{w}) nor bbox ({y1 - y0},{x1 - x0})")
        if not mask.any():
            return None
        return TeacherInstance(self.class_id, self.confidence, (cx0, cy0, cx1, cy1),
                               mask)


@dataclass(frozen=True)
class DistillConfig:
    u_max: int = 8
    delta_min: int = 8
    delta_max: int = 64
    a_thresh: float = 0.8
    lr: float = 0.01
    momentum: float = 0.9
    conf_thresh: float = 0.5
    weight_factor: float = 5.0
    box_dilation: float = 0.15

    def __post_init__(self):
        if not 1 <= self.delta_min <= self.delta_max:
            raise ValueError("need 1 <= delta_min <= delta_max")
        ratio = self.delta_max // self.delta_min
        if self.delta_min * ratio != self.delta_max or ratio & (ratio - 1):
            raise ValueError("delta_max / delta_min must be a power of two")
        if not 0 < self.a_thresh < 1:
            raise ValueError("a_thresh must lie in (0, 1)")
        if self.u_max < 1:
            raise ValueError("u_max must be >= 1")


@dataclass
class FrameRecord:
    frame_index: int
    teacher_invoked: bool
    updates_performed: int
    a_curr: float | None
    delta: int                                # stride after this frame
    eval_iou: float | None = None
    prediction: np.ndarray | None = None


@dataclass
class StreamReport:
    records: list[FrameRecord] = field(default_factory=list)
    n_frames: int = 0
    teacher_invocations: int = 0
    teacher_failures: int = 0
    total_updates: int = 0
    numeric_events: int = 0                   # non-finite losses / rejected steps

    def eval_series(self) -> list[float | None]:
        return [r.eval_iou for r in self.records]


# -- teacher output -> training targets --------------------------------------

def retain_instances(instances, conf_thresh: float,
                     frame_hw: tuple[int, int]) -> list[TeacherInstance]:
    """Clamp to the frame and keep instances at or above the confidence
    threshold, ordered by ascending confidence (ties keep input order) so a
    later paint always has the higher confidence."""
    kept = []
    for inst in instances:
        clamped = inst.clamped(frame_hw)
        if clamped is not None and clamped.confidence >= conf_thresh:
            kept.append(clamped)
    kept.sort(key=lambda i: i.confidence)
    return kept


def _paint(target: np.ndarray, inst: TeacherInstance, value) -> None:
    x0, y0, x1, y1 = inst.bbox
    if inst.mask.shape == target.shape:
        target[inst.mask] = value
    else:
        region = target[y0:y1, x0:x1]
        region[inst.mask] = value


def rasterize_teacher(instances, conf_thresh: float,
                      frame_hw: tuple[int, int]) -> np.ndarray:
    """Convert instance predictions to a semantic class-id map.

    Pixels covered by no retained instance are background (class 0); where
    retained instances overlap, the most confident one wins.
    """
    labels = np.zeros(frame_hw, dtype=np.uint8)
    for inst in retain_instances(instances, conf_thresh, frame_hw):
        _paint(labels, inst, inst.class_id)
    return labels


def dilate_box(bbox: tuple[int, int, int, int], box_dilation: float,
               frame_hw: tuple[int, int]) -> tuple[int, int, int, int]:
    """Grow a half-open box by ``box_dilation`` total relative growth: each
    side moves outward by half that fraction of the side length; the grown
    minimum is floored, the maximum ceiled, and the result clamped."""
    h, w = frame_hw
    x0, y0, x1, y1 = bbox
    gx = 0.5 * box_dilation * (x1 - x0)
    gy = 0.5 * box_dilation * (y1 - y0)
    return (max(0, int(np.floor(x0 - gx))), max(0, int(np.floor(y0 - gy))),
            min(w, int(np.ceil(x1 + gx))), min(h, int(np.ceil(y1 + gy))))


def build_weight_map(retained, box_dilation: float, weight_factor: float,
                     frame_hw: tuple[int, int]) -> np.ndarray:
    """Loss weights: ``weight_factor`` inside the union of dilated instance
    boxes, 1.0 elsewhere."""
    weights = np.ones(frame_hw, dtype=np.float32)
    for inst in retained:
        x0, y0, x1, y1 = dilate_box(inst.bbox, box_dilation, frame_hw)
        weights[y0:y1, x0:x1] = weight_factor
    return weights


# -- accuracy signal ----------------------------------------------------------

def control_iou(teacher_labels: np.ndarray, prediction: np.ndarray) -> float:
    """Accuracy check used by the scheduler: mean IoU over the foreground
    classes present in either map; falls back to the background IoU when
    neither map contains foreground."""
    res = mean_iou(prediction, teacher_labels, exclude_background=True)
    if res.defined:
        return res.value
    full = mean_iou(prediction, teacher_labels, exclude_background=False)
    return full.per_class.get(0, 1.0)


# -- students -----------------------------------------------------------------

class JITNetStudent:
    """Wraps a network with prediction and single-step training.

    ``train_step`` reuses the forward pass cached by the immediately
    preceding ``predict`` call on the same frame, so each adaptation loop
    iteration costs one forward plus (when updating) one backward.
    """

    def __init__(self, net: JITNet, lr: float = 0.01, momentum: float = 0.9):
        self.net = net
        self.optimizer = SGDMomentum(net.param_states(), lr, momentum)
        self._cached_logits: np.ndarray | None = None
        self._cached_key: int | None = None

    @staticmethod
    def prepare(frame: np.ndarray) -> np.ndarray:
        """uint8 (H, W, 3) frame -> float (3, H, W) in [0, 1]."""
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) frame, got {frame.shape}")
        return np.ascontiguousarray(frame.transpose(2, 0, 1), dtype=np.float32) / 255.0

    def predict(self, frame: np.ndarray) -> np.ndarray:
        logits = self.net.forward(self.prepare(frame))
        if not np.isfinite(logits).all():
            raise StreamNumericError(-1)
        self._cached_logits = logits
        self._cached_key = id(frame)
        return logits.argmax(axis=0).astype(np.uint8)

    def train_step(self, frame: np.ndarray, labels: np.ndarray,
                   weights: np.ndarray) -> float:
        if self._cached_key != id(frame) or self._cached_logits is None:
            self.predict(frame)
        res = weighted_softmax_cross_entropy(self._cached_logits, labels, weights)
        if not np.isfinite(res.loss):
            self.optimizer.zero_grad()
            self._cached_key = None
            return res.loss
        self.net.backward(res.grad)
        self.optimizer.step()
        self._cached_key = None
        return res.loss


@dataclass
class AdaptResult:
    updates: int
    a_curr: float
    prediction: np.ndarray
    aborted: bool = False                     # non-finite loss ended the loop


def adapt_on_frame(student, frame, labels: np.ndarray, weights: np.ndarray,
                   cfg: DistillConfig) -> AdaptResult:
    """Bounded adaptation loop on one teacher frame.

    Repeatedly predicts and scores against the teacher labels; while the
    accuracy is below threshold and fewer than ``u_max`` steps were taken,
    performs one weighted cross-entropy SGD step.  The iteration counter
    advances on every pass including the terminating check, and the frame's
    recorded prediction is the one from the final iteration.
    """
    updates = 0
    aborted = False
    update = True
    a_curr = 0.0
    prediction = None
    while update:
        prediction = student.predict(frame)
        a_curr = control_iou(labels, prediction)
        if updates < cfg.u_max and a_curr < cfg.a_thresh:
            loss = student.train_step(frame, labels, weights)
            if not np.isfinite(loss):
                aborted = True
                update = False
            else:
                updates += 1
        else:
            update = False
    return AdaptResult(updates, a_curr, prediction, aborted)


def update_stride(delta: int, a_curr: float, cfg: DistillConfig) -> int:
    """Double after a strictly passing check, otherwise halve; clamp."""
    if a_curr > cfg.a_thresh:
        return min(cfg.delta_max, 2 * delta)
    return max(cfg.delta_min, delta // 2)


def process_stream(source, teacher, cfg: DistillConfig, student,
                   eval_labels=None, store_predictions: bool = False,
                   progress=None) -> StreamReport:
    """Run the full online loop over a frame source.

    ``student`` is either a network (wrapped into :class:`JITNetStudent`
    with the configured learning rate and momentum) or any object exposing
    ``predict``/``train_step``.  ``eval_labels(frame_index)`` optionally
    supplies reference label maps scored against every frame's prediction.
    Frames are consumed strictly in order, one pass, no lookahead.
    """
    if isinstance(student, JITNet):
        student = JITNetStudent(student, cfg.lr, cfg.momentum)
    report = StreamReport()
    delta = cfg.delta_min
    for frame_index, frame in source:
        record = FrameRecord(frame_index, False, 0, None, delta)
        if frame_index % delta == 0:
            try:
                instances = teacher.predict(frame_index, frame)
            except TeacherError:
                report.teacher_failures += 1
                instances = None
            if instances is not None:
                frame_hw = frame.shape[:2]
                retained = retain_instances(instances, cfg.conf_thresh, frame_hw)
                labels = rasterize_teacher(retained, cfg.conf_thresh, frame_hw)
                weights = build_weight_map(retained, cfg.box_dilation,
                                           cfg.weight_factor, frame_hw)
                try:
                    result = adapt_on_frame(student, frame, labels, weights, cfg)
                except StreamNumericError:
                    raise StreamNumericError(frame_index) from None
                delta = update_stride(delta, result.a_curr, cfg)
                record.teacher_invoked = True
                record.updates_performed = result.updates
                record.a_curr = result.a_curr
                record.delta = delta
                prediction = result.prediction
                report.teacher_invocations += 1
                report.total_updates += result.updates
                report.numeric_events += int(result.aborted)
            else:
                prediction = _predict_checked(student, frame, frame_index)
        else:
            prediction = _predict_checked(student, frame, frame_index)

        if eval_labels is not None:
            reference = eval_labels(frame_index)
            if reference is not None:
                record.eval_iou = mean_iou(prediction, reference,
                                           exclude_background=True).value
        if store_predictions:
            record.prediction = prediction
        report.records.append(record)
        report.n_frames += 1
        if progress is not None:
            progress(record)
    return report


def _predict_checked(student, frame, frame_index: int) -> np.ndarray:
    try:
        return student.predict(frame)
    except StreamNumericError:
        raise StreamNumericError(frame_index) from None


# -- offline baseline ---------------------------------------------------------

def materialize_dataset(source, teacher, cfg: DistillConfig, every_kth: int):
    """Collect every k-th frame with rasterized labels and weight maps, the
    training set for the offline baseline."""
    samples = []
    for frame_index, frame in source:
        if frame_index % every_kth:
            continue
        frame_hw = frame.shape[:2]
        retained = retain_instances(teacher.predict(frame_index, frame),
                                    cfg.conf_thresh, frame_hw)
        samples.append((frame,
                        rasterize_teacher(retained, cfg.conf_thresh, frame_hw),
                        build_weight_map(retained, cfg.box_dilation,
                                         cfg.weight_factor, frame_hw)))
    return samples


def offline_oracle_train(net: JITNet, dataset, epochs: int, lr: float = 0.01,
                         momentum: float = 0.9, seed: int = 0,
                         epoch_hook=None) -> JITNet:
    """Epoch-based training over a pre-materialized labeled set with the same
    weighted loss as the online loop (batch size stays 1; frames are shuffled
    per epoch with a seeded permutation)."""
    if not dataset:
        raise ValueError("offline training requires a non-empty dataset")
    student = JITNetStudent(net, lr, momentum)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for i in order:
            frame, labels, weights = dataset[i]
            losses.append(student.train_step(frame, labels, weights))
        if epoch_hook is not None:
            epoch_hook(epoch, float(np.mean(losses)))
    return net


# -- recorded-teacher wire format ----------------------------------------------
#
# One JSON object per line:
#   {"frame": int, "instances": [{"class": int, "conf": float,
#    "bbox": [x0, y0, x1, y1], "rle": [...]}]}
# The RLE covers the bbox region row-major as alternating zero/one run
# lengths, starting with a zero-run (which may be 0).


def encode_rle(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return [0]
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def decode_rle(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = shape[0] * shape[1]
    if sum(runs) != total:
        raise ValueError(f"rle covers {sum(runs)} pixels, mask needs {total}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape)


def write_predictions_jsonl(path, predictions: dict[int, list[TeacherInstance]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame_index in sorted(predictions):
            rows = []
            for inst in predictions[frame_index]:
                x0, y0, x1, y1 = inst.bbox
                mask = inst.mask
                if mask.shape != (y1 - y0, x1 - x0):
                    mask = mask[y0:y1, x0:x1]
                rows.append({"class": int(inst.class_id),
                             "conf": float(inst.confidence),
                             "bbox": [int(x0), int(y0), int(x1), int(y1)],
                             "rle": encode_rle(mask)})
            fh.write(json.dumps({"frame": int(frame_index), "instances": rows},
                                separators=(",", ":")) + "\n")


def read_predictions_jsonl(path) -> dict[int, list[TeacherInstance]]:
    table: dict[int, list[TeacherInstance]] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            frame_index = int(row["frame"])
            instances = []
            for inst in row["instances"]:
                x0, y0, x1, y1 = (int(v) for v in inst["bbox"])
                mask = decode_rle(inst["rle"], (y1 - y0, x1 - x0))
                instances.append(TeacherInstance(int(inst["class"]),
                                                 float(inst["conf"]),
                                                 (x0, y0, x1, y1), mask))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}: line {line_no}: {exc}") from exc
        table[frame_index] = instances
    return table
