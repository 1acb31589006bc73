"""Command-line front end.

Stages talk to each other only through files: manifests, weight files,
FEAT feature files, prediction files and loss logs. Every command prints
its resolved configuration as one ``config {...}`` JSON line on stdout
before doing any work; logs go to stderr.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import classifiers as C
from . import rng as rngs
from .dataio import (PreprocessConfig, compute_means, load_input, load_manifest,
                     write_manifest)
from .errors import ActionFeatError, DivergedError
from .evaluation import (accuracy, confusion, majority_vote,
                         split_by_video, video_accuracy, video_counts)
from .finetune import (FinetuneConfig, backbone_cache, replace_head,
                       sweep_layer_size, train_head_cached)
from .network import (default_arch, format_arch, infer_shapes, init_weights, load_arch,
                      load_weights, save_weights)
from .tensor import format_shape
from .pipeline import (ALGORITHMS, extract_featureset, fit_predict,
                       layer_size_evaluator, relabel)

log = logging.getLogger("actionfeat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# --- argument helpers --------------------------------------------------------


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_triple(text):
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected exactly three channel means")
    return vals


def _head_sizes(items):
    """Parse ``f19=6144`` style overrides into ``{19: 6144}``."""
    sizes = {}
    for item in items or ():
        for part in item.split(","):
            key, sep, value = part.partition("=")
            key = key.strip().lower().lstrip("f").lstrip("c")
            if not sep or not key.isdigit() or not value.strip().isdigit():
                raise UsageError(f"bad --head value {part!r}; expected e.g. f19=6144")
            sizes[int(key)] = int(value)
    return sizes


def _add_arch(p, weights_required=True):
    p.add_argument("--arch", help="architecture config (default: the shipped 23-layer network)")
    p.add_argument("--weights", required=weights_required, help="weight file")


def _add_preprocess(p):
    p.add_argument("--resize", type=int, default=256, help="shorter-side resize target")
    p.add_argument("--crop", type=int, default=227, help="centre crop side")
    p.add_argument("--means", type=_float_triple, default=None,
                   help="per-channel means r,g,b (default: computed from --means-from or 0,0,0)")
    p.add_argument("--means-from", help="manifest whose images define the channel means")


def _add_classifier(p):
    p.add_argument("--algo", choices=ALGORITHMS, default="svm")
    p.add_argument("--exponent", type=int, default=2, help="polynomial kernel exponent")
    p.add_argument("--C", dest="C_", type=float, default=1.0, help="SVM box constraint")
    p.add_argument("--k", type=int, default=3, help="neighbours for knn")
    p.add_argument("--max-depth", type=int, default=20)
    p.add_argument("--min-leaf", type=int, default=2)


def _add_finetune(p):
    p.add_argument("--classes", type=int, required=True, help="number of classes the head scores")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--iters", type=int, default=20_000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--head", action="append", metavar="fN=SIZE",
                   help="fc layer size override, e.g. f19=6144 (repeatable)")
    p.add_argument("--trainable", type=_int_list, default=None,
                   help="fc layers to update (default: all fc layers)")
    p.add_argument("--log-every", type=int, default=100)


def build_parser():
    parser = argparse.ArgumentParser(prog="actionfeat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="video-consistent train/test split of a manifest")
    p.add_argument("manifest")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)

    p = sub.add_parser("init", help="write randomly initialised weights for an architecture")
    p.add_argument("--arch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("arch", help="print the architecture and its shape chain")
    p.add_argument("--arch")

    p = sub.add_parser("extract", help="write tapped fc features for a manifest")
    _add_arch(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--taps", type=_int_list, default=None, help="fc layers to tap, e.g. 16,19")
    p.add_argument("--out", required=True)
    _add_preprocess(p)

    p = sub.add_parser("finetune", help="head-only SGD fine-tuning")
    _add_arch(p)
    p.add_argument("--manifest", required=True, help="training manifest")
    _add_finetune(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--out-arch", help="architecture of the tuned network (default: OUT_WEIGHTS.arch)")
    p.add_argument("--loss-log", help="tab-separated iteration/loss file")
    _add_preprocess(p)

    p = sub.add_parser("classify", help="train a classifier on one FEAT file, predict another")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    _add_classifier(p)
    p.add_argument("--out", required=True, help="predictions file")

    p = sub.add_parser("evaluate", help="confusion matrix and accuracies for predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True, help="manifest the predictions were made for")
    p.add_argument("--by-video", action="store_true", help="also report per-video majority votes")
    p.add_argument("--out-confusion", help="write the confusion matrix as TSV")

    p = sub.add_parser("sweep", help="midpoint layer-size sweep")
    p.add_argument("--layer", type=int, required=True, help="fc layer to resize, e.g. 19")
    p.add_argument("--initial", type=_int_list, required=True, help="three sizes, e.g. 2048,4096,8192")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--granularity", type=int, default=512)
    _add_arch(p)
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--test", required=True, help="test manifest")
    p.add_argument("--taps", type=_int_list, default=None)
    _add_finetune(p)
    _add_classifier(p)
    p.add_argument("--seed", type=int, default=0)
    _add_preprocess(p)
    return parser


# --- shared plumbing -----------------------------------------------------------


def echo_config(args, **extra):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    cfg.update(extra)
    print("config " + json.dumps(cfg, sort_keys=True, default=str), flush=True)


def _spec(args):
    return load_arch(args.arch) if args.arch else default_arch()


def _preprocess_cfg(args):
    means = args.means
    if means is None and args.means_from:
        means = compute_means(load_manifest(args.means_from),
                              PreprocessConfig(args.resize, args.crop))
    if means is None:
        means = (0.0, 0.0, 0.0)
    try:
        return PreprocessConfig(args.resize, args.crop, tuple(means))
    except ValueError as exc:
        raise UsageError(str(exc))


def _finetune_cfg(args):
    return FinetuneConfig(learning_rate=args.lr, iterations=args.iters, batch_size=args.batch,
                          head_sizes=_head_sizes(args.head), trainable=args.trainable,
                          seed=args.seed, log_every=args.log_every)


def _classifier_params(args):
    if args.algo == "svm":
        return {"exponent": args.exponent, "C_": args.C_}
    if args.algo == "knn":
        return {"k": args.k}
    return {"max_depth": args.max_depth, "min_leaf": args.min_leaf}


def read_predictions(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ActionFeatError(f"{path} line {lineno}: expected index<TAB>video<TAB>label")
            rows.append((int(parts[0]), parts[1], parts[2]))
    return rows


def write_predictions(path, video_ids, labels):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, (vid, label) in enumerate(zip(video_ids, labels)):
            fh.write(f"{i}\t{vid}\t{label}\n")


# --- commands ------------------------------------------------------------------


def cmd_split(args):
    if not 0.0 < args.test_fraction < 1.0:
        raise UsageError("--test-fraction must be strictly between 0 and 1")
    echo_config(args)
    manifest = load_manifest(args.manifest)
    result = split_by_video(manifest, args.test_fraction, args.seed)
    write_manifest(result.train, args.out_train)
    write_manifest(result.test, args.out_test)
    train_counts, test_counts = video_counts(result.train), video_counts(result.test)
    print("class\ttrain_videos\ttest_videos")
    for c in manifest.classes:
        print(f"{c}\t{train_counts[c]}\t{test_counts[c]}")
    return EXIT_OK


def cmd_init(args):
    echo_config(args)
    spec = _spec(args)
    net = init_weights(spec, rngs.stream(args.seed, "init"))
    save_weights(net, args.out)
    print(f"wrote {len(net.params)} parameter layers to {args.out}")
    return EXIT_OK


def cmd_arch(args):
    spec = _spec(args)
    print(format_arch(spec), end="")
    for layer, shape in zip(spec.layers, infer_shapes(spec)):
        print(f"# {layer.index}\t{layer.kind}\t{format_shape(shape)}")
    return EXIT_OK


def cmd_extract(args):
    spec = _spec(args)
    taps = sorted(set(args.taps if args.taps is not None else spec.taps))
    pcfg = _preprocess_cfg(args)
    echo_config(args, taps=taps, channel_means=pcfg.channel_means)
    net = load_weights(spec, args.weights)
    manifest = load_manifest(args.manifest)
    fs = extract_featureset(net, manifest, taps, pcfg)
    C.write_features(fs, args.out)
    print(f"wrote {len(fs)} records of dimension {fs.dim} to {args.out}")
    return EXIT_OK


def cmd_finetune(args):
    spec = _spec(args)
    cfg = _finetune_cfg(args)
    pcfg = _preprocess_cfg(args)
    out_arch = args.out_arch or args.out_weights + ".arch"
    echo_config(args, out_arch=out_arch, channel_means=pcfg.channel_means,
                head_sizes=cfg.head_sizes, head_init="fresh gaussian(0, 0.01^2)")
    manifest = load_manifest(args.manifest)
    if args.classes < len(manifest.classes):
        raise ActionFeatError(f"--classes {args.classes} is below the {len(manifest.classes)} "
                              "classes in the manifest")
    net = load_weights(spec, args.weights)
    net = replace_head(net, cfg.head_sizes, args.classes, rngs.stream(args.seed, "init"))
    log.info("caching backbone outputs for %d images", len(manifest))
    feats = backbone_cache(net, [load_input(manifest, s, pcfg) for s in manifest.samples])
    tuned, losses = train_head_cached(net, feats, manifest.labels(), cfg)
    save_weights(tuned, args.out_weights)
    with open(out_arch, "w", encoding="utf-8") as fh:
        fh.write(format_arch(tuned.spec))
    if args.loss_log:
        with open(args.loss_log, "w", encoding="utf-8") as fh:
            fh.write(losses.to_tsv())
    for it, loss in losses.entries:
        log.info("iter %d loss %.6f", it, loss)
    print(f"final loss {losses.entries[-1][1]:.6f}" if losses.entries else "no iterations run")
    return EXIT_OK


def cmd_classify(args):
    echo_config(args)
    train = C.read_features(args.train)
    test = relabel(C.read_features(args.test), train.classes)
    preds = fit_predict(train, test, args.algo, **_classifier_params(args))
    write_predictions(args.out, test.video_ids, [train.classes[p] for p in preds])
    acc = accuracy(confusion(preds, test.labels, train.classes))
    print(f"test frame accuracy {100 * acc:.2f}%")
    return EXIT_OK


def cmd_evaluate(args):
    echo_config(args)
    manifest = load_manifest(args.truth)
    rows = read_predictions(args.predictions)
    if not rows:
        raise ActionFeatError("prediction file is empty")
    if sorted(r[0] for r in rows) != list(range(len(manifest))):
        raise ActionFeatError(f"predictions cover {len(rows)} records; truth manifest has "
                              f"{len(manifest)} (indices must be 0..{len(manifest) - 1})")
    # labels that are predicted but never true still get a confusion column
    extra = sorted({label for _, _, label in rows} - set(manifest.classes))
    if extra:
        log.warning("predicted labels %s do not occur in the truth manifest", extra)
    classes = list(manifest.classes) + extra
    lookup = {c: i for i, c in enumerate(classes)}
    truth = manifest.labels()
    preds = np.empty(len(manifest), dtype=np.int64)
    for idx, vid, label in rows:
        if vid != manifest.samples[idx].video_id:
            raise ActionFeatError(f"record {idx}: video {vid!r} does not match the manifest")
        preds[idx] = lookup[label]
    m = confusion(preds, truth, classes)
    print(m.to_tsv(), end="")
    if args.out_confusion:
        with open(args.out_confusion, "w", encoding="utf-8") as fh:
            fh.write(m.to_tsv())
    print(f"frame accuracy {100 * accuracy(m):.2f}% ({m.trace}/{m.total})")
    if args.by_video:
        votes = majority_vote((s.video_id, p) for s, p in zip(manifest.samples, preds))
        video_truth = {s.video_id: t for s, t in zip(manifest.samples, truth)}
        acc = video_accuracy(votes, video_truth)
        correct = sum(votes[v] == video_truth[v] for v in votes)
        print(f"video accuracy {100 * acc:.2f}% ({correct}/{len(votes)})")
    return EXIT_OK


def make_evaluator(args):
    """Build the per-size evaluation used by ``sweep`` (patched out in tests)."""
    spec = _spec(args)
    net = load_weights(spec, args.weights)
    taps = sorted(set(args.taps if args.taps is not None else spec.taps))
    return layer_size_evaluator(net, args.layer, load_manifest(args.train),
                                load_manifest(args.test), _finetune_cfg(args),
                                _preprocess_cfg(args), taps, args.algo,
                                **_classifier_params(args))


def cmd_sweep(args):
    if len(args.initial) != 3 or len(set(args.initial)) != 3:
        raise UsageError("--initial needs three distinct sizes")
    if args.rounds < 0 or args.granularity < 1:
        raise UsageError("--rounds must be >= 0 and --granularity >= 1")
    echo_config(args)
    evaluate = make_evaluator(args)
    best, trace = sweep_layer_size(evaluate, args.initial, args.rounds, args.granularity)
    print("size\taccuracy")
    for size, acc in trace:
        print(f"F{args.layer}={size}\t{100 * acc:.2f}")
    print(f"best F{args.layer}={best}")
    return EXIT_OK


COMMANDS = {
    "split": cmd_split, "init": cmd_init, "arch": cmd_arch, "extract": cmd_extract,
    "finetune": cmd_finetune, "classify": cmd_classify, "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"actionfeat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedError as exc:
        print(f"actionfeat {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ActionFeatError, ValueError) as exc:
        print(f"actionfeat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"actionfeat {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
