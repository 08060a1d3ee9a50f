"""Two-stage training, inference, dataset splitting and metric computation.

Stage 1 optimizes encoder + projection head with the contrastive loss over a
balanced, pre-augmented sample set; stage 2 freezes the encoder and trains
the classifier head on the frozen global features with cross-entropy.  The
"baseline" loss mode instead trains encoder + classifier jointly on
cross-entropy in a single phase of epochs_stage1 + epochs_stage2 epochs.
The returned model carries the parameters with the best validation F1 among
the per-epoch snapshots of the classifier-training phase (including its
starting state), everything deterministic per seed.
"""

from dataclasses import dataclass
import io
import math
from pathlib import Path
import struct

import numpy as np

from . import nn
from .augment import AugmentConfig, balance_dataset
from .contrastive import LossConfig, build_pair_mask, supcon_loss_and_grad
from .geometry import (NormStats, apply_norm, batch_resample, fit_norm_stats,
                       mean_fa, tract_arc_lengths)
from .tract_io import read_text, write_text


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class SingleClassTrainingData(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


class TooFewSubjects(ValueError):
    pass


class EmptyTractogram(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class ModelFileError(ValueError):
    pass


FLOAT_MODES = {"64-bit": np.float64, "32-bit": np.float32}
LOSS_MODES = ("baseline", "label_only", "micro")


@dataclass
class TrainConfig:
    P: int = 60
    batch_size: int = 512
    lr: float = 0.01
    tau: float = 0.1
    t_fa: float = 0.1
    epochs_stage1: int = 100
    epochs_stage2: int = 100
    augment_mode: str = "subsampling"
    augment_factor: object = 8     # positive int or "auto"
    loss_mode: str = "micro"
    seed: int = 0
    float_mode: str = "64-bit"
    fa_channel: bool = False       # append mean FA as a 4th input channel
    min_length_mm: float = 80.0

    def __post_init__(self):
        if self.P < 2 or self.batch_size < 1:
            raise ConfigError("P must be >= 2 and batch_size >= 1")
        if self.lr <= 0 or self.tau <= 0:
            raise ConfigError("lr and tau must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.float_mode not in FLOAT_MODES:
            raise ConfigError(f"float_mode must be one of {tuple(FLOAT_MODES)}")
        if self.min_length_mm < 0:
            raise ConfigError("min_length_mm must be >= 0")

    @property
    def dtype(self):
        return FLOAT_MODES[self.float_mode]


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass
class SubjectData:
    """One subject's tractogram with a per-streamline label array."""

    name: str
    tractogram: object
    labels: np.ndarray


@dataclass
class Model:
    """Everything needed for inference, as stored in the model file."""

    params: nn.ModelParams
    norm: NormStats
    P: int
    scalar_channel: str = "FA"
    fa_channel: bool = False
    min_length_mm: float = 80.0
    float_mode: str = "64-bit"


# ---------------------------------------------------------------------------
# Config files: flat key=value, unknown keys are errors
# ---------------------------------------------------------------------------

def _parse_bool(s):
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_factor(s):
    return "auto" if s == "auto" else int(s)


def parse_kv_config(text, parsers, cls):
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in parsers:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in kwargs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            kwargs[key] = parsers[key](val)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from None
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


_TRAIN_PARSERS = {
    "P": int, "batch_size": int, "lr": float, "tau": float, "t_fa": float,
    "epochs_stage1": int, "epochs_stage2": int, "augment_mode": str,
    "augment_factor": _parse_factor, "loss_mode": str, "seed": int,
    "float_mode": str, "fa_channel": _parse_bool, "min_length_mm": float,
}

_SYNTH_PARSERS = {
    "n_target": int, "n_nontarget": int, "points_min": int, "points_max": int,
    "fa_mean_target": float, "fa_mean_nontarget": float, "fa_noise_sd": float,
    "geometry_overlap": float, "seed": int,
}

_AUGMENT_PARSERS = {"mode": str, "factor": _parse_factor, "P": int, "seed": int}


def load_train_config(text):
    return parse_kv_config(text, _TRAIN_PARSERS, TrainConfig)


def load_synth_config(text):
    from .synth import SynthConfig
    return parse_kv_config(text, _SYNTH_PARSERS, SynthConfig)


def load_augment_config(text):
    return parse_kv_config(text, _AUGMENT_PARSERS, AugmentConfig)


# ---------------------------------------------------------------------------
# Dataset directories: per-subject text tractograms plus one labels.tsv
# ---------------------------------------------------------------------------

def read_labels_tsv(path):
    """labels.tsv -> {(subject, index): label}."""
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DatasetError(f"{path}:{lineno}: expected 'subject index label'")
        subject, idx_s, lab_s = parts
        try:
            idx, lab = int(idx_s), int(lab_s)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad integer") from None
        if lab not in (0, 1):
            raise DatasetError(f"{path}:{lineno}: label must be 0 or 1")
        table[(subject, idx)] = lab
    return table


def write_labels_tsv(path, table):
    lines = [f"{subj}\t{idx}\t{lab}" for (subj, idx), lab in sorted(table.items())]
    Path(path).write_text("\n".join(lines) + "\n" if lines else "")


def load_dataset_dir(path):
    """Read every *.txt tractogram plus labels.tsv -> list of SubjectData."""
    path = Path(path)
    files = sorted(path.glob("*.txt"))
    if not files:
        raise DatasetError(f"no .txt tractograms found in {path}")
    labels_path = path / "labels.tsv"
    if not labels_path.exists():
        raise DatasetError(f"missing labels file {labels_path}")
    table = read_labels_tsv(labels_path)
    subjects = []
    for f in files:
        name = f.stem
        tract = read_text(f.read_text())
        labels = np.empty(len(tract.streamlines), dtype=np.int64)
        for i in range(len(tract.streamlines)):
            if (name, i) not in table:
                raise DatasetError(f"no label for streamline {i} of subject {name!r}")
            labels[i] = table[(name, i)]
        subjects.append(SubjectData(name, tract, labels))
    return subjects


def save_subject(dirpath, name, tractogram, labels):
    """Write <name>.txt and merge this subject's labels into labels.tsv."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    (dirpath / f"{name}.txt").write_text(write_text(tractogram))
    labels_path = dirpath / "labels.tsv"
    table = read_labels_tsv(labels_path) if labels_path.exists() else {}
    table = {k: v for k, v in table.items() if k[0] != name}
    for i, lab in enumerate(labels):
        table[(name, int(i))] = int(lab)
    write_labels_tsv(labels_path, table)


def split_dataset(subjects, fractions, seed=0):
    """Partition subjects (not streamlines) into len(fractions) groups.

    Counts are apportioned by largest remainder, assignment order comes from
    a seeded permutation; the groups are disjoint and their union is the
    input.
    """
    n = len(subjects)
    k = len(fractions)
    if n < k:
        raise TooFewSubjects(f"{n} subjects cannot fill {k} splits")
    fr = np.asarray(fractions, dtype=np.float64)
    if (fr < 0).any() or fr.sum() <= 0:
        raise ValueError("fractions must be nonnegative with positive sum")
    quotas = n * fr / fr.sum()
    counts = np.floor(quotas).astype(int)
    order = np.argsort(-(quotas - counts), kind="stable")
    for i in range(n - counts.sum()):
        counts[order[i]] += 1
    perm = np.random.default_rng(seed).permutation(n)
    groups, start = [], 0
    for c in counts:
        groups.append([subjects[j] for j in perm[start:start + c]])
        start += c
    return tuple(groups)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def evaluate(pred, truth):
    """Confusion counts and accuracy/precision/recall/F1 with class 1 positive.

    Zero-denominator convention: precision, recall and F1 are 0 when their
    denominators vanish.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise LengthMismatch(f"pred {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise LengthMismatch("empty label lists")
    for arr, what in ((pred, "pred"), (truth, "truth")):
        bad = set(np.unique(arr).tolist()) - {0, 1}
        if bad:
            raise ValueError(f"{what} labels must be binary, got {bad}")
    tp = int(((pred == 1) & (truth == 1)).sum())
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    tn = int(((pred == 0) & (truth == 0)).sum())
    acc = (tp + tn) / pred.size
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return Metrics(tp, fp, fn, tn, acc, prec, rec, f1)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _channel_of(subjects):
    names = list(subjects[0].tractogram.scalar_names)
    if not names:
        raise DatasetError("training data carries no scalar channel")
    return "FA" if "FA" in names else names[0]


def _labeled_pairs(subjects, min_length_mm):
    """Length-filtered (streamline, label, scalar_names) triples, order kept."""
    pairs = []
    for subj in subjects:
        t = subj.tractogram
        if len(subj.labels) != len(t.streamlines):
            raise DatasetError(f"label count mismatch for subject {subj.name!r}")
        if not t.streamlines:
            continue
        lengths = tract_arc_lengths(t)
        for s, lab, length in zip(t.streamlines, subj.labels, lengths):
            if length >= min_length_mm:
                pairs.append((s, int(lab), t.scalar_names))
    return pairs


def _network_inputs(coords, fas, norm, fa_channel, dtype):
    x = apply_norm(coords, norm)
    if fa_channel:
        n, p, _ = x.shape
        col = np.broadcast_to(np.asarray(fas)[:, None, None], (n, p, 1))
        x = np.concatenate([x, col], axis=2)
    return np.ascontiguousarray(x, dtype=dtype)


def _log_line(epoch, stage, loss, m):
    return (f"{epoch}\t{stage}\t{loss:.8g}\t{m.accuracy:.6f}\t{m.f1:.6f}"
            f"\t{m.precision:.6f}\t{m.recall:.6f}")


def _batches(n, batch_size, rng, min_size=1):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = perm[start:start + batch_size]
        if chunk.size >= min_size:
            yield chunk


def train(train_subjects, val_subjects, cfg):
    """Fit a model on training subjects with per-epoch validation -> (Model, log).

    The log is a list of tab-separated lines
    ``epoch  stage  train_loss  val_acc  val_f1  val_prec  val_rec`` with
    stage 1 = contrastive phase, 2 = classifier phase, 0 = the joint baseline
    phase.
    """
    dtype = cfg.dtype
    channel = _channel_of(train_subjects)

    train_pairs = _labeled_pairs(train_subjects, cfg.min_length_mm)
    if not train_pairs:
        raise DatasetError("no training streamlines pass the length filter")
    train_labels_all = {lab for _, lab, _ in train_pairs}
    if len(train_labels_all) < 2:
        raise SingleClassTrainingData(f"training split has labels {train_labels_all}")

    aug_cfg = AugmentConfig(mode=cfg.augment_mode, factor=cfg.augment_factor,
                            P=cfg.P, seed=cfg.seed)
    samples = balance_dataset([(s, lab) for s, lab, _ in train_pairs], aug_cfg,
                              scalar_names=train_pairs[0][2], channel=channel)
    coords = np.stack([s.coords for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    fas = np.array([s.mean_fa for s in samples], dtype=np.float64)

    norm = fit_norm_stats(coords)
    x = _network_inputs(coords, fas, norm, cfg.fa_channel, dtype)

    val_pairs = _labeled_pairs(val_subjects, cfg.min_length_mm)
    if not val_pairs:
        raise DatasetError("validation split is empty after length filtering")
    val_coords = batch_resample([s for s, _, _ in val_pairs], cfg.P)
    val_fas = np.array([mean_fa(s, channel, names) for s, _, names in val_pairs])
    y_val = np.array([lab for _, lab, _ in val_pairs], dtype=np.int64)
    x_val = _network_inputs(val_coords, val_fas, norm, cfg.fa_channel, dtype)

    params = nn.init_params(cfg.seed, in_dim=4 if cfg.fa_channel else 3, dtype=dtype)

    def finish(final_params, log):
        return Model(final_params, norm, cfg.P, channel, cfg.fa_channel,
                     cfg.min_length_mm, cfg.float_mode), log

    if cfg.epochs_stage1 == 0 and cfg.epochs_stage2 == 0:
        return finish(params, [])

    rng = np.random.default_rng([cfg.seed, 17])
    log = []

    def check_finite(loss, what):
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"{what} loss became {loss}")

    def eval_current():
        logits = nn.classify(params, nn.encode(params, x_val))
        return evaluate(np.argmax(logits, axis=1), y_val)

    if cfg.loss_mode == "baseline":
        names = [n_ for n_, _ in params.param_items()
                 if n_.startswith(("encoder.", "cls."))]
        opt = nn.adam_init(params, names, lr=cfg.lr)
        best_f1, best_params = eval_current().f1, params.copy()
        for epoch in range(1, cfg.epochs_stage1 + cfg.epochs_stage2 + 1):
            losses = []
            for chunk in _batches(len(samples), cfg.batch_size, rng):
                g, cache_e = nn.encode_forward(params, x[chunk])
                logits, cache_c = nn.classify_forward(params, g)
                loss, dlogits = nn.softmax_cross_entropy(logits, y[chunk])
                check_finite(loss, "cross-entropy")
                grads, dg = nn.classify_backward(params, cache_c, dlogits)
                grads.update(nn.encode_backward(params, cache_e, dg))
                nn.adam_step(opt, params, grads)
                losses.append(loss)
            m = eval_current()
            if m.f1 > best_f1:
                best_f1, best_params = m.f1, params.copy()
            log.append(_log_line(epoch, 0, float(np.mean(losses)), m))
        return finish(best_params, log)

    # contrastive phase
    loss_cfg = LossConfig(tau=cfg.tau, t_fa=cfg.t_fa,
                          mode="micro" if cfg.loss_mode == "micro" else "label_only")
    stage1_names = [n_ for n_, _ in params.param_items()
                    if n_.startswith(("encoder.", "proj."))]
    opt1 = nn.adam_init(params, stage1_names, lr=cfg.lr)
    for epoch in range(1, cfg.epochs_stage1 + 1):
        losses = []
        for chunk in _batches(len(samples), cfg.batch_size, rng, min_size=2):
            g, cache_e = nn.encode_forward(params, x[chunk])
            z, cache_p = nn.project_forward(params, g)
            mask = build_pair_mask(y[chunk], fas[chunk], loss_cfg)
            loss, dz, n_anchors = supcon_loss_and_grad(z, mask, cfg.tau)
            check_finite(loss, "contrastive")
            grads, dg = nn.project_backward(params, cache_p, dz)
            grads.update(nn.encode_backward(params, cache_e, dg))
            nn.adam_step(opt1, params, grads)
            losses.append(loss / n_anchors if n_anchors else 0.0)
        m = eval_current()
        log.append(_log_line(epoch, 1, float(np.mean(losses)), m))

    # classifier phase on frozen global features
    feats = nn.encode(params, x)
    feats_val = nn.encode(params, x_val)

    def eval_frozen():
        return evaluate(np.argmax(nn.classify(params, feats_val), axis=1), y_val)

    cls_names = [n_ for n_, _ in params.param_items() if n_.startswith("cls.")]
    opt2 = nn.adam_init(params, cls_names, lr=cfg.lr)
    best_f1, best_params = eval_frozen().f1, params.copy()
    for epoch in range(1, cfg.epochs_stage2 + 1):
        losses = []
        for chunk in _batches(len(samples), cfg.batch_size, rng):
            logits, cache_c = nn.classify_forward(params, feats[chunk])
            loss, dlogits = nn.softmax_cross_entropy(logits, y[chunk])
            check_finite(loss, "cross-entropy")
            grads, _ = nn.classify_backward(params, cache_c, dlogits)
            nn.adam_step(opt2, params, grads)
            losses.append(loss)
        m = eval_frozen()
        if m.f1 > best_f1:
            best_f1, best_params = m.f1, params.copy()
        log.append(_log_line(epoch, 2, float(np.mean(losses)), m))
    return finish(best_params, log)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict(model, tractogram):
    """Classify every streamline that passes the length filter.

    Returns (kept_indices, labels, probabilities): indices refer to positions
    in the input tractogram; probabilities are softmax scores, rows sum to 1.
    Each streamline is evaluated independently (its result cannot depend on
    batch position: BLAS kernels give tail rows a different summation order,
    so batched evaluation is not bit-stable across duplicates/reorderings).
    """
    if not tractogram.streamlines:
        raise EmptyTractogram("tractogram has no streamlines")
    lengths = tract_arc_lengths(tractogram)
    kept = np.flatnonzero(lengths >= model.min_length_mm)
    if kept.size == 0:
        raise EmptyTractogram("no streamline passes the length filter")
    streams = [tractogram.streamlines[i] for i in kept]
    coords = batch_resample(streams, model.P)
    if model.fa_channel:
        fas = np.array([mean_fa(s, model.scalar_channel, tractogram.scalar_names)
                        for s in streams])
    else:
        fas = np.zeros(kept.size)
    x = _network_inputs(coords, fas, model.norm, model.fa_channel,
                        FLOAT_MODES[model.float_mode])
    logits = np.empty((kept.size, nn.N_CLASSES))
    for i in range(kept.size):
        g = nn.encode(model.params, x[i:i + 1])
        logits[i] = nn.classify(model.params, g)[0]
    probs = nn.softmax_probs(logits)
    return kept, np.argmax(logits, axis=1), probs


def write_predictions(path, indices, labels, probs):
    lines = [f"{int(i)}\t{int(lab)}\t{p[0]:.9g}\t{p[1]:.9g}"
             for i, lab, p in zip(indices, labels, probs)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path):
    """Predictions file -> (indices, labels); extra columns are ignored."""
    idx, lab = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DatasetError(f"{path}:{lineno}: expected 'index label [...]'")
        idx.append(int(parts[0]))
        lab.append(int(parts[1]))
    return np.array(idx, dtype=np.int64), np.array(lab, dtype=np.int64)


# ---------------------------------------------------------------------------
# Model file: magic "FCK1", config block, then f64 tensors with shape headers
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"FCK1"


def save_model(model):
    """Serialize a Model to bytes (single little-endian binary blob)."""
    p = model.params
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<iBBd", model.P,
                          0 if model.float_mode == "64-bit" else 1,
                          1 if model.fa_channel else 0,
                          model.min_length_mm))
    name_bytes = model.scalar_channel.encode("utf-8")
    buf.write(struct.pack("<H", len(name_bytes)))
    buf.write(name_bytes)
    buf.write(struct.pack("<3d", *model.norm.mean))
    buf.write(struct.pack("<d", model.norm.scale))
    enc_widths = [w.shape[1] for w in p.encoder_w]
    proj_widths = [w.shape[1] for w in p.proj_w]
    cls_widths = [w.shape[1] for w in p.cls_w]
    buf.write(struct.pack("<i", p.in_dim))
    for widths in (enc_widths, proj_widths, cls_widths):
        buf.write(struct.pack("<B", len(widths)))
        buf.write(struct.pack(f"<{len(widths)}i", *widths))
    for _, arr in p.param_items():
        arr64 = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<B", arr64.ndim))
        buf.write(struct.pack(f"<{arr64.ndim}i", *arr64.shape))
        buf.write(arr64.tobytes())
    return buf.getvalue()


def load_model(data):
    """Inverse of save_model; raises ModelFileError on malformed input."""
    try:
        buf = io.BytesIO(data)
        if buf.read(4) != MODEL_MAGIC:
            raise ModelFileError("bad model file magic")
        p_count, float_flag, fa_flag, min_len = struct.unpack("<iBBd", buf.read(14))
        (name_len,) = struct.unpack("<H", buf.read(2))
        channel = buf.read(name_len).decode("utf-8")
        mean = np.array(struct.unpack("<3d", buf.read(24)))
        (scale,) = struct.unpack("<d", buf.read(8))
        (in_dim,) = struct.unpack("<i", buf.read(4))
        widths = []
        for _ in range(3):
            (k,) = struct.unpack("<B", buf.read(1))
            widths.append(list(struct.unpack(f"<{k}i", buf.read(4 * k))))
        enc_widths, proj_widths, cls_widths = widths

        def read_tensor():
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = struct.unpack(f"<{ndim}i", buf.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            raw = buf.read(8 * n)
            if len(raw) != 8 * n:
                raise ModelFileError("model file truncated in tensor data")
            return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

        groups = {}
        for group, width_list in (("encoder", enc_widths), ("proj", proj_widths),
                                  ("cls", cls_widths)):
            ws, bs = [], []
            for _ in width_list:
                ws.append(read_tensor())
                bs.append(read_tensor())
            groups[group] = (ws, bs)
    except (struct.error, ValueError) as e:
        if isinstance(e, ModelFileError):
            raise
        raise ModelFileError(f"malformed model file: {e}") from None

    float_mode = "64-bit" if float_flag == 0 else "32-bit"
    params = nn.ModelParams(*groups["encoder"], *groups["proj"], *groups["cls"])
    if params.in_dim != in_dim or [w.shape[1] for w in params.encoder_w] != enc_widths:
        raise ModelFileError("model file width header disagrees with tensors")
    params = params.astype(FLOAT_MODES[float_mode])
    return Model(params, NormStats(mean, scale), p_count, channel,
                 bool(fa_flag), min_len, float_mode)


def save_model_file(model, path):
    Path(path).write_bytes(save_model(model))


def load_model_file(path):
    return load_model(Path(path).read_bytes())
