"""Dataset manifests, portable pixmap decoding and input preprocessing."""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ImageDecodeError, ManifestError
from .tensor import DTYPE


@dataclass(frozen=True)
class Sample:
    image_path: str
    label: str
    video_id: str = ""


@dataclass
class DatasetManifest:
    """Samples plus the ordered class list that defines label indices.

    Relative image paths are resolved against ``root`` (the directory the
    manifest was read from).
    """

    samples: list
    classes: list = None
    root: str = ""

    def __post_init__(self):
        if self.classes is None:
            self.classes = sorted({s.label for s in self.samples})
        unknown = {s.label for s in self.samples} - set(self.classes)
        if unknown:
            raise ManifestError(f"labels {sorted(unknown)} not in class list")

    def __len__(self):
        return len(self.samples)

    def label_index(self, label):
        return self.classes.index(label)

    def labels(self):
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[s.label] for s in self.samples], dtype=np.int64)

    def image_file(self, sample):
        if os.path.isabs(sample.image_path) or not self.root:
            return sample.image_path
        return os.path.join(self.root, sample.image_path)


def parse_manifest(text, root=""):
    samples, seen = [], set()
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError("expected path<TAB>label<TAB>video_id", lineno)
        path, label, video = fields
        if not path or not label:
            raise ManifestError("empty path or label", lineno)
        if path in seen:
            raise ManifestError(f"duplicate path {path!r}", lineno)
        seen.add(path)
        samples.append(Sample(path, label, video))
    if not samples:
        raise ManifestError("manifest is empty")
    return DatasetManifest(samples, root=root)


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_manifest(text, root=os.path.dirname(os.path.abspath(path)))


def format_manifest(manifest):
    return "".join(f"{s.image_path}\t{s.label}\t{s.video_id}\n" for s in manifest.samples)


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_manifest(manifest))


# --- images ------------------------------------------------------------------

_WHITESPACE = b" \t\r\n\v\f"


def _header_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens after the magic.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and (data[pos] in _WHITESPACE or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated header")
        tokens.append(data[start:pos])
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ImageDecodeError("header not terminated by whitespace")
    return tokens, pos + 1


def decode_pnm(data):
    """Decode P2/P3/P5/P6 bytes into an ``(H, W, 3)`` uint8 array."""
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageDecodeError(f"unsupported image magic {magic!r}")
    tokens, offset = _header_tokens(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageDecodeError("non-numeric header field") from None
    if width < 1 or height < 1:
        raise ImageDecodeError(f"bad image size {width}x{height}")
    if maxval != 255:
        raise ImageDecodeError(f"maxval {maxval} unsupported (need 255)")
    channels = 3 if magic in (b"P3", b"P6") else 1
    n = width * height * channels
    if magic in (b"P5", b"P6"):
        payload = data[offset:offset + n]
        if len(payload) < n:
            raise ImageDecodeError(f"truncated payload: {len(payload)} of {n} bytes")
        pixels = np.frombuffer(payload, dtype=np.uint8)
    else:
        try:
            values = [int(v) for v in data[offset:].split()]
        except ValueError:
            raise ImageDecodeError("non-numeric sample in ASCII payload") from None
        if len(values) < n:
            raise ImageDecodeError(f"truncated payload: {len(values)} of {n} samples")
        pixels = np.array(values[:n])
        if pixels.min() < 0 or pixels.max() > 255:
            raise ImageDecodeError("sample value outside 0..255")
        pixels = pixels.astype(np.uint8)
    img = pixels.reshape(height, width, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def decode_image(path):
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def encode_ppm(img):
    """Binary P6 encoding of an ``(H, W, 3)`` uint8 image."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


# --- preprocessing ---------------------------------------------------------------


@dataclass
class PreprocessConfig:
    resize_to: int = 256
    crop: int = 227
    channel_means: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.crop > self.resize_to or self.crop < 1:
            raise ValueError(f"crop {self.crop} must be in 1..resize_to ({self.resize_to})")
        self.channel_means = tuple(float(m) for m in self.channel_means)
        if len(self.channel_means) != 3:
            raise ValueError("need exactly three channel means")


def _axis_weights(n_in, n_out):
    """Source indices and fractions for half-pixel-centred bilinear sampling."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img, height, width):
    """Bilinear resize of an ``(H, W, C)`` array; returns float64."""
    src = np.asarray(img, dtype=np.float64)
    y0, y1, fy = _axis_weights(src.shape[0], height)
    x0, x1, fx = _axis_weights(src.shape[1], width)
    fx = fx[None, :, None]
    top = src[y0][:, x0] + (src[y0][:, x1] - src[y0][:, x0]) * fx
    bot = src[y1][:, x0] + (src[y1][:, x1] - src[y1][:, x0]) * fx
    return top + (bot - top) * fy[:, None, None]


def resized_dims(height, width, shorter):
    if height <= width:
        return shorter, max(shorter, int(np.floor(width * shorter / height + 0.5)))
    return max(shorter, int(np.floor(height * shorter / width + 0.5))), shorter


def crop_offsets(height, width, crop):
    return (height - crop) // 2, (width - crop) // 2


def _resize_crop(img, cfg):
    h, w = resized_dims(img.shape[0], img.shape[1], cfg.resize_to)
    if (h, w) == img.shape[:2]:
        resized = img.astype(np.float64)
    else:
        resized = resize_bilinear(img, h, w)
    oy, ox = crop_offsets(h, w, cfg.crop)
    return resized[oy:oy + cfg.crop, ox:ox + cfg.crop]


def preprocess(img, cfg):
    """Resize shorter side, centre crop, subtract channel means; returns (3, crop, crop)."""
    patch = _resize_crop(img, cfg)
    patch = patch - np.asarray(cfg.channel_means, dtype=np.float64)
    return np.ascontiguousarray(patch.transpose(2, 0, 1), dtype=DTYPE)


def compute_means(manifest, cfg):
    """Per-channel mean of the resized and cropped pixels over the manifest."""
    if len(manifest) == 0:
        raise ManifestError("cannot compute means of an empty manifest")
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for sample in manifest.samples:
        patch = _resize_crop(decode_image(manifest.image_file(sample)), cfg)
        total += patch.reshape(-1, 3).sum(axis=0)
        count += patch.shape[0] * patch.shape[1]
    return tuple(float(v) for v in total / count)


def load_input(manifest, sample, cfg):
    return preprocess(decode_image(manifest.image_file(sample)), cfg)
