"""Glue between the network, the classifiers and the evaluation code."""

import numpy as np

from . import classifiers as C
from . import rng as rngs
from .dataio import load_input
from .errors import ConfigError, ShapeError
from .evaluation import accuracy, confusion
from .finetune import backbone_cache, replace_head, train_head_cached
from .network import concat_features, forward

ALGORITHMS = ("svm", "knn", "tree")


def extract_featureset(net, manifest, taps, preprocess_cfg):
    """Tap vectors for every sample, concatenated in ascending tap order."""
    taps = sorted(set(taps))
    if not taps:
        raise ConfigError("no taps requested")
    if len(manifest) == 0:
        raise ConfigError("manifest is empty")
    rows = []
    for sample in manifest.samples:
        res = forward(net, load_input(manifest, sample, preprocess_cfg), "infer", taps=taps)
        rows.append(concat_features([res.taps[t] for t in taps]).values)
    return C.FeatureSet(np.stack(rows), manifest.labels(),
                        [s.video_id for s in manifest.samples], manifest.classes)


def fit_predict(train, test, algo, exponent=2, C_=1.0, k=3, max_depth=20, min_leaf=2):
    """Train ``algo`` on ``train`` and return predicted label indices for ``test``.

    Indices refer to ``train.classes``.
    """
    if train.dim != test.dim:
        raise ShapeError(f"train features have dimension {train.dim}, test {test.dim}")
    if algo == "svm":
        model = C.svm_train(train, C=C_, exponent=exponent)
        return C.svm_predict_many(model, test.features)
    if algo == "knn":
        return C.knn_predict_many(train, k, test.features)
    if algo == "tree":
        root = C.tree_train(train, max_depth=max_depth, min_leaf=min_leaf)
        return C.tree_predict_many(root, test.features)
    raise ConfigError(f"unknown algorithm {algo!r}; choose from {', '.join(ALGORITHMS)}")


def relabel(fs, classes):
    """Express ``fs`` labels against another class table (by name)."""
    lookup = {c: i for i, c in enumerate(classes)}
    missing = {fs.classes[l] for l in fs.labels} - set(lookup)
    if missing:
        raise ConfigError(f"classes {sorted(missing)} are unknown to the training set")
    labels = [lookup[fs.classes[l]] for l in fs.labels]
    return C.FeatureSet(fs.features, labels, fs.video_ids, classes)


def layer_size_evaluator(net, layer, train_manifest, test_manifest, finetune_cfg,
                         preprocess_cfg, taps, algo="svm", **algo_params):
    """Return ``evaluate(size) -> test frame accuracy`` for a layer-size sweep.

    For each size the head is rebuilt with ``layer`` at that size,
    fine-tuned, and the chosen classifier is scored on the tapped features.
    """
    n_classes = len(train_manifest.classes)
    train_inputs = [load_input(train_manifest, s, preprocess_cfg) for s in train_manifest.samples]
    feats = backbone_cache(net, train_inputs)

    def evaluate(size):
        rng = rngs.stream(finetune_cfg.seed, f"init-{size}")
        sizes = {**finetune_cfg.head_sizes, layer: size}
        tuned = replace_head(net, sizes, n_classes, rng)
        tuned, _ = train_head_cached(tuned, feats, train_manifest.labels(), finetune_cfg)
        tr = extract_featureset(tuned, train_manifest, taps, preprocess_cfg)
        te = relabel(extract_featureset(tuned, test_manifest, taps, preprocess_cfg), tr.classes)
        preds = fit_predict(tr, te, algo, **algo_params)
        return accuracy(confusion(preds, te.labels, tr.classes))

    return evaluate
