"""Head-only fine-tuning and the layer-size sweep.

The convolutional backbone (every layer before the first fc layer) is
frozen. Its output is computed once per image and cached; SGD then runs
only through the fully connected head.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import rng as rngs
from .dataio import load_input
from .errors import ConfigError, DivergedError, SweepError
from .network import (ArchSpec, LayerSpec, Network, expected_param_shapes,
                      forward_backbone, INIT_STD)
from .tensor import DTYPE


@dataclass
class FinetuneConfig:
    learning_rate: float = 1e-4
    iterations: int = 20_000
    batch_size: int = 32
    head_sizes: dict = field(default_factory=dict)
    trainable: tuple = None   # fc layer indices; None means every head fc layer
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning rate must be a finite value >= 0, got {self.learning_rate}")
        if self.iterations < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("iterations, batch_size and log_every must be positive")
        self.head_sizes = {int(k): int(v) for k, v in self.head_sizes.items()}


@dataclass
class LossLog:
    entries: list = field(default_factory=list)   # (iteration, loss)

    def add(self, iteration, loss):
        if self.entries and iteration <= self.entries[-1][0]:
            raise ValueError("loss log iterations must increase")
        self.entries.append((int(iteration), float(loss)))

    def to_tsv(self):
        return "".join(f"{i}\t{loss!r}\n" for i, loss in self.entries)

    def losses(self):
        return [loss for _, loss in self.entries]


def replace_head(net, head_sizes, num_classes, rng):
    """Rebuild every fc layer with fresh Gaussian weights.

    ``head_sizes`` maps fc layer index to output size. Unlisted fc layers
    keep their current size, except the last one which defaults to
    ``num_classes``. Backbone parameters are copied unchanged.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    fcs = net.spec.fc_indices()
    unknown = set(head_sizes) - set(fcs)
    if unknown:
        raise ConfigError(f"head sizes given for non-fc layers {sorted(unknown)}")
    sizes = {i: net.spec.layer(i).params["out"] for i in fcs}
    sizes[fcs[-1]] = num_classes
    sizes.update({int(k): int(v) for k, v in head_sizes.items()})
    for i, s in sizes.items():
        if s < 1:
            raise ConfigError(f"layer {i}: size must be positive, got {s}")
    if sizes[fcs[-1]] < num_classes:
        raise ConfigError(f"layer {fcs[-1]}: size {sizes[fcs[-1]]} is below the "
                          f"{num_classes} classes it must score")

    new_layers = [LayerSpec(l.index, l.kind, {**l.params, "out": sizes[l.index]})
                  if l.kind == "fc" else l for l in net.spec.layers]
    spec = ArchSpec(new_layers, net.spec.input_shape, net.spec.taps)
    expected = expected_param_shapes(spec)
    params = {}
    for idx in sorted(expected):
        if idx in fcs:
            wshape, bshape = expected[idx]
            w = rng.standard_normal(wshape, dtype=DTYPE)
            w *= DTYPE(INIT_STD)
            params[idx] = L.FcParams(w, np.zeros(bshape, dtype=DTYPE))
        else:
            params[idx] = net.params[idx]
    return Network(spec, params)


def _head_layers(spec):
    head = spec.layers[spec.head_start() - 1:]
    for layer in head:
        if layer.kind not in ("fc", "relu", "dropout", "softmax"):
            raise ConfigError(f"layer {layer.index} ({layer.kind}) cannot be trained in the head")
    return head


def head_loss_and_grads(net, feats, labels, train=False, rng=None, trainable=None):
    """Mean cross-entropy of the head on backbone outputs, with fc gradients.

    Returns ``(loss, {fc index: (grad_w, grad_b)})``.
    """
    head = _head_layers(net.spec)
    trainable = set(net.spec.fc_indices() if trainable is None else trainable)
    x = feats
    cache = []
    for layer in head:
        if layer.kind == "fc":
            cache.append(x)
            x = L.fc_forward(x, net.params[layer.index])
        elif layer.kind == "relu":
            cache.append(x)
            x = L.relu_forward(x)
        elif layer.kind == "dropout":
            x, mask = L.dropout_forward(x, layer.params["rate"], train, rng)
            cache.append(mask if train else None)   # identity when not training
        else:
            cache.append(None)
    probs = L.softmax(x)
    loss, grad = L.cross_entropy(probs, labels)

    lowest = min(trainable) if trainable else None
    grads = {}
    for layer, saved in zip(reversed(head), reversed(cache)):
        if lowest is None or layer.index < lowest:
            break
        if layer.kind == "fc":
            gx, gw, gb = L.fc_backward(saved, net.params[layer.index], grad)
            if layer.index in trainable:
                grads[layer.index] = (gw, gb)
            grad = gx
        elif layer.kind == "relu":
            grad = L.relu_backward(saved, grad)
        elif layer.kind == "dropout" and saved is not None:
            grad = L.dropout_backward(grad, saved, layer.params["rate"])
    return loss, grads


def backbone_cache(net, inputs):
    """Stack the frozen-backbone outputs of ``inputs`` into a matrix."""
    return np.stack([forward_backbone(net, x) for x in inputs])


def train_head_cached(net, feats, labels, cfg):
    """SGD on the head given cached backbone outputs ``feats`` (n, D)."""
    labels = np.asarray(labels, dtype=np.int64)
    n_out = net.params[net.spec.fc_indices()[-1]].out_dim
    if len(feats) == 0:
        raise ConfigError("no training samples")
    if labels.max() >= n_out:
        raise ConfigError(f"label {labels.max()} exceeds the head's {n_out} outputs")
    trainable = tuple(net.spec.fc_indices() if cfg.trainable is None else cfg.trainable)
    bad = set(trainable) - set(net.spec.fc_indices())
    if bad:
        raise ConfigError(f"trainable layers {sorted(bad)} are not fc layers")

    net = net.copy()
    pick = rngs.stream(cfg.seed, "shuffle")
    drop = rngs.stream(cfg.seed, "dropout")
    lr = DTYPE(cfg.learning_rate)
    log = LossLog()
    # overflow is reported as DivergedError below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(cfg.iterations):
            idx = pick.integers(0, len(feats), size=cfg.batch_size)
            loss, grads = head_loss_and_grads(net, feats[idx], labels[idx], True, drop, trainable)
            if not math.isfinite(loss):
                raise DivergedError(it, loss)
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                log.add(it, loss)
            for i, (gw, gb) in grads.items():
                p = net.params[i]
                p.weights -= lr * gw.astype(DTYPE)
                p.bias -= lr * gb.astype(DTYPE)
            for i in grads:
                p = net.params[i]
                if not (np.all(np.isfinite(p.weights)) and np.all(np.isfinite(p.bias))):
                    raise DivergedError(it, float("nan"))
    return net, log


def train_head(net, manifest, cfg, preprocess_cfg):
    """Fine-tune the head on the images of ``manifest``."""
    n_out = net.params[net.spec.fc_indices()[-1]].out_dim
    if len(manifest.classes) > n_out:
        raise ConfigError(f"{len(manifest.classes)} classes but the head has {n_out} outputs; "
                          "apply replace_head first")
    feats = backbone_cache(net, (load_input(manifest, s, preprocess_cfg) for s in manifest.samples))
    return train_head_cached(net, feats, manifest.labels(), cfg)


def _snap(value, granularity):
    return int(math.floor(value / granularity + 0.5)) * granularity


def sweep_layer_size(evaluate, initial, rounds=1, granularity=512):
    """Search layer sizes by repeatedly recentring on the best result.

    After scoring the three initial sizes, each round takes the best size
    and its better-scoring neighbour (adjacent among the sizes evaluated so
    far), evaluates their midpoint, then the midpoints between that point and
    each of the two. Sizes are snapped to ``granularity`` and never evaluated
    twice. Returns ``(best size, [(size, accuracy), ...])`` in evaluation order.
    """
    initial = [int(s) for s in initial]
    if len(initial) != 3 or len(set(initial)) != 3:
        raise ConfigError(f"need three distinct initial sizes, got {initial}")
    if rounds < 0 or granularity < 1:
        raise ConfigError("rounds must be >= 0 and granularity >= 1")
    scores, trace = {}, []

    def run(size):
        if size in scores or size < 1:
            return
        try:
            acc = float(evaluate(size))
        except Exception as exc:
            raise SweepError(size, exc) from exc
        scores[size] = acc
        trace.append((size, acc))

    def best_size():
        # highest score; ties go to the smaller layer
        return max(sorted(scores), key=lambda s: scores[s])

    for size in sorted(initial):
        run(size)
    for _ in range(rounds):
        ordered = sorted(scores)
        best = best_size()
        pos = ordered.index(best)
        neighbours = [ordered[p] for p in (pos - 1, pos + 1) if 0 <= p < len(ordered)]
        partner = max(neighbours, key=lambda s: (scores[s], -s))
        mid = _snap((best + partner) / 2, granularity)
        run(mid)
        lo, hi = sorted((best, partner))
        run(_snap((lo + mid) / 2, granularity))
        run(_snap((mid + hi) / 2, granularity))
    return best_size(), trace
