"""Single executable exposing the pipeline: synth, convert, augment, train,
predict, evaluate.

Exit codes: 0 success, 1 usage error, 2 data error.  Heavy modules are
imported lazily so that ``--threads`` can cap BLAS/numba worker counts via
environment variables before numpy is loaded.
"""

import argparse
import os
from pathlib import Path
import sys


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _apply_thread_cap(n):
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser():
    parser = _Parser(prog="tractscl",
                     description="Streamline classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled tractogram")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="dataset directory to write into")
    p.add_argument("--name", default="synth", help="subject name (file stem)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("convert", help="convert between .trk and .txt")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("augment", help="write a balanced augmented dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", dest="val_data",
                   help="validation dataset dir (default: subject split of --data)")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="classify streamlines of a tractogram")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="compare predictions against truth labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--subject", help="subject name when truth is a labels.tsv")
    p.set_defaults(func=_cmd_evaluate)

    return parser


def _read_tractogram(path):
    from .tract_io import read_text, read_trk
    path = Path(path)
    if path.suffix == ".trk":
        return read_trk(path.read_bytes())
    if path.suffix == ".txt":
        return read_text(path.read_text())
    raise ValueError(f"unsupported tractogram extension: {path.suffix!r}")


def _cmd_synth(args):
    from .pipeline import load_synth_config, save_subject
    from .synth import generate
    cfg = load_synth_config(Path(args.config).read_text())
    tract, labels = generate(cfg)
    save_subject(args.out, args.name, tract, labels)
    print(f"wrote {len(tract.streamlines)} streamlines "
          f"({int(labels.sum())} target) as subject {args.name!r} in {args.out}")
    return 0


def _cmd_convert(args):
    from .tract_io import write_text, write_trk
    tract = _read_tractogram(args.infile)
    out = Path(args.outfile)
    if out.suffix == ".trk":
        out.write_bytes(write_trk(tract))
    elif out.suffix == ".txt":
        out.write_text(write_text(tract))
    else:
        raise ValueError(f"unsupported output extension: {out.suffix!r}")
    print(f"converted {len(tract.streamlines)} streamlines -> {out}")
    return 0


def _cmd_augment(args):
    import numpy as np

    from .augment import balance_dataset
    from .pipeline import load_augment_config, load_dataset_dir, save_subject
    from .tract_io import Streamline, Tractogram

    cfg = load_augment_config(Path(args.config).read_text())
    subjects = load_dataset_dir(args.data)

    # balance across the whole dataset, then regroup samples by source subject
    pairs, owner = [], []
    for subj in subjects:
        for s, lab in zip(subj.tractogram.streamlines, subj.labels):
            pairs.append((s, int(lab)))
            owner.append(subj.name)
    scalar_names = subjects[0].tractogram.scalar_names
    channel = "FA" if "FA" in scalar_names else scalar_names[0]
    samples = balance_dataset(pairs, cfg, scalar_names=scalar_names, channel=channel)

    total = 0
    for subj in subjects:
        mine = [s for s in samples if owner[s.source_index] == subj.name]
        streams = [Streamline(s.coords, np.full((cfg.P, 1), s.mean_fa)) for s in mine]
        labels = np.array([s.label for s in mine], dtype=np.int64)
        save_subject(args.out, subj.name, Tractogram(streams, [channel]), labels)
        total += len(mine)
    print(f"wrote {total} augmented samples for {len(subjects)} subjects to {args.out}")
    return 0


def _cmd_train(args):
    if args.threads:
        _apply_thread_cap(args.threads)
    from .pipeline import (load_dataset_dir, load_train_config, save_model_file,
                           split_dataset, train)
    cfg = load_train_config(Path(args.config).read_text())
    subjects = load_dataset_dir(args.data)
    if args.val_data:
        train_subjects, val_subjects = subjects, load_dataset_dir(args.val_data)
    else:
        n_val = max(1, round(0.2 * len(subjects)))
        train_subjects, val_subjects = split_dataset(
            subjects, (len(subjects) - n_val, n_val), cfg.seed)
    model, log = train(train_subjects, val_subjects, cfg)
    save_model_file(model, args.model)
    Path(args.log).write_text("\n".join(log) + "\n" if log else "")
    print(f"trained on {len(train_subjects)} subjects, "
          f"validated on {len(val_subjects)}; model -> {args.model}")
    return 0


def _cmd_predict(args):
    if args.threads:
        _apply_thread_cap(args.threads)
    from .pipeline import load_model_file, predict, write_predictions
    model = load_model_file(args.model)
    tract = _read_tractogram(args.infile)
    indices, labels, probs = predict(model, tract)
    write_predictions(args.outfile, indices, labels, probs)
    print(f"predicted {len(indices)} streamlines "
          f"({int(labels.sum())} target) -> {args.outfile}")
    return 0


def _load_truth(path, subject):
    """Truth labels as {index: label} from a labels.tsv or an 'index label' file."""
    from .pipeline import DatasetError, read_labels_tsv, read_predictions
    rows = [ln.split() for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
    if rows and len(rows[0]) >= 3 and not rows[0][0].lstrip("-").isdigit():
        table = read_labels_tsv(path)
        names = sorted({subj for subj, _ in table})
        if subject is None:
            if len(names) != 1:
                raise DatasetError(
                    f"truth file covers subjects {names}; pass --subject")
            subject = names[0]
        if subject not in names:
            raise DatasetError(f"subject {subject!r} not in truth file")
        return {idx: lab for (subj, idx), lab in table.items() if subj == subject}
    idx, lab = read_predictions(path)
    return dict(zip(idx.tolist(), lab.tolist()))


def _cmd_evaluate(args):
    from .pipeline import DatasetError, evaluate, read_predictions
    pred_idx, pred_lab = read_predictions(args.pred)
    truth = _load_truth(args.truth, args.subject)
    missing = [int(i) for i in pred_idx if int(i) not in truth]
    if missing:
        raise DatasetError(f"no truth label for predicted indices {missing[:5]}")
    truth_lab = [truth[int(i)] for i in pred_idx]
    m = evaluate(pred_lab, truth_lab)
    print(f"acc={m.accuracy * 100:.3f} f1={m.f1 * 100:.3f} "
          f"prec={m.precision * 100:.3f} rec={m.recall * 100:.3f}")
    return 0


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
