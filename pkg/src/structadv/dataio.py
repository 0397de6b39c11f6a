"""File surfaces: IDX dataset ingestion, synthetic datasets, binary PNM image
emission, and deterministic JSON/CSV report serialization.
"""

import csv
import io
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
# double-precision tensor container used to persist adversarial images for
# re-rendering: same big-endian layout, type byte 0x0E (float64), 4 dims
IDX_TENSOR_MAGIC = 0x00000E04


@dataclass
class Dataset:
    images: np.ndarray   # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray   # (N,) int64
    num_classes: int


def _read_be32(data, offset, path):
    if offset + 4 > len(data):
        raise ValueError(f"{path}: truncated at byte {len(data)} (needed header word at {offset})")
    return struct.unpack_from(">i", data, offset)[0]


def parse_idx(images_path, labels_path, num_classes=10):
    """Load a big-endian IDX image/label pair, mapping pixel bytes to [0,1]."""
    with open(images_path, "rb") as fh:
        raw = fh.read()
    magic = _read_be32(raw, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(f"{images_path}: bad magic 0x{magic & 0xffffffff:08x} at byte 0 "
                         f"(expected 0x{IDX_IMAGE_MAGIC:08x})")
    n = _read_be32(raw, 4, images_path)
    h = _read_be32(raw, 8, images_path)
    w = _read_be32(raw, 12, images_path)
    expected = 16 + n * h * w
    if len(raw) != expected:
        raise ValueError(f"{images_path}: payload is {len(raw) - 16} bytes at byte 16, "
                         f"expected {n * h * w}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    images = images.astype(np.float64) / 255.0

    with open(labels_path, "rb") as fh:
        raw = fh.read()
    magic = _read_be32(raw, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise ValueError(f"{labels_path}: bad magic 0x{magic & 0xffffffff:08x} at byte 0 "
                         f"(expected 0x{IDX_LABEL_MAGIC:08x})")
    n_labels = _read_be32(raw, 4, labels_path)
    if len(raw) != 8 + n_labels:
        raise ValueError(f"{labels_path}: payload is {len(raw) - 8} bytes at byte 8, "
                         f"expected {n_labels}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if n_labels != n:
        raise ValueError(f"count mismatch: {n} images vs {n_labels} labels")
    if labels.size and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} outside [0, {num_classes})")
    return Dataset(images, labels, num_classes)


def write_idx(dataset, images_path, labels_path):
    """Write a dataset back to the IDX pair; round trips bit-identically for
    data quantized to 1/255."""
    images = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    n, c, h, w = images.shape
    if c != 1:
        raise ValueError("IDX image files hold single-channel data")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def write_tensor_stack(path, tensors):
    """Persist a (N, C, H, W) float64 stack big-endian for bit-exact re-reads."""
    arr = np.ascontiguousarray(tensors, dtype=">f8")
    n, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiiii", IDX_TENSOR_MAGIC, n, c, h, w))
        fh.write(arr.tobytes())


def read_tensor_stack(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = _read_be32(raw, 0, path)
    if magic != IDX_TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic & 0xffffffff:08x} at byte 0")
    n, c, h, w = (_read_be32(raw, 4 * i, path) for i in range(1, 5))
    expected = 20 + n * c * h * w * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: payload is {len(raw) - 20} bytes at byte 20, "
                         f"expected {expected - 20}")
    return np.frombuffer(raw, dtype=">f8", offset=20).astype(np.float64).reshape(n, c, h, w)


def synth_dataset(kind, n, seed, shape=(1, 28, 28), num_classes=10, noise=0.1):
    """Deterministic synthetic datasets.

    blobs: one Gaussian cluster per class around a random prototype image,
    clipped to [0,1]; prototypes are resampled until pairwise distances leave a
    comfortable margin, so a linear probe separates the classes.

    bars: the class is the position/orientation of a bright bar (half the
    classes horizontal, half vertical) over a dim background; a task whose
    discriminative signal is low rank.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    labels = rng.integers(num_classes, size=n)
    images = np.empty((n, c, h, w))

    if kind == "blobs":
        proto_rng = np.random.default_rng(seed + 1)
        while True:
            protos = proto_rng.uniform(0.1, 0.9, size=(num_classes, c, h, w))
            flat = protos.reshape(num_classes, -1)
            d2 = ((flat[:, None] - flat[None]) ** 2).sum(-1)
            np.fill_diagonal(d2, np.inf)
            if np.sqrt(d2.min()) > 6.0 * max(noise, 1e-6):
                break
        images = np.clip(protos[labels] + noise * rng.standard_normal((n, c, h, w)), 0.0, 1.0)
        return Dataset(images, labels, num_classes)

    if kind == "bars":
        half = num_classes // 2
        for i in range(n):
            img = 0.12 + noise * rng.standard_normal((c, h, w))
            y = labels[i]
            intensity = 0.55 + 0.15 * rng.uniform()
            if y < half:
                band = h // half
                r0 = y * band + rng.integers(max(band - 2, 1))
                img[:, r0:r0 + 2, :] += intensity
            else:
                band = w // (num_classes - half)
                k0 = (y - half) * band + rng.integers(max(band - 2, 1))
                img[:, :, k0:k0 + 2] += intensity
            images[i] = np.clip(img, 0.0, 1.0)
        return Dataset(images, labels, num_classes)

    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def _to_bytes_image(x):
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, x):
    """Binary PGM (1 channel) or PPM (3 channels) from a [0,1] tensor."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    data = _to_bytes_image(x)
    with open(path, "wb") as fh:
        if c == 1:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data[0].tobytes())
        elif c == 3:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.transpose(1, 2, 0).tobytes())
        else:
            raise ValueError(f"PNM output needs 1 or 3 channels, got {c}")


def render_perturbation(delta):
    """Signed perturbation as bytes centered at 128: round(128 + 127 d / max|d|)."""
    delta = np.asarray(delta, dtype=np.float64)
    scale = max(float(np.abs(delta).max(initial=0.0)), 1e-12)
    return np.clip(np.round(128.0 + 127.0 * delta / scale), 0, 255).astype(np.uint8)


def write_perturbation_pnm(path, delta):
    data = render_perturbation(delta)
    c, h, w = data.shape
    with open(path, "wb") as fh:
        if c == 1:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data[0].tobytes())
        elif c == 3:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.transpose(1, 2, 0).tobytes())
        else:
            raise ValueError(f"PNM output needs 1 or 3 channels, got {c}")


def write_images(x_ori, x_adv, delta, out_dir, index):
    """Emit original / adversarial / perturbation images for one sample."""
    os.makedirs(out_dir, exist_ok=True)
    write_pnm(os.path.join(out_dir, f"sample{index:05d}_original.pnm"), x_ori)
    write_pnm(os.path.join(out_dir, f"sample{index:05d}_adversarial.pnm"), x_adv)
    write_perturbation_pnm(os.path.join(out_dir, f"sample{index:05d}_perturbation.pnm"), delta)


CSV_COLUMNS = ("index", "clean_correct", "adv_correct", "first_success_iter",
               "l2", "linf", "nuclear", "nonzero_pixels")


def _report_to_dict(report):
    return {
        "config": report.config,
        "clean_accuracy": report.clean_accuracy,
        "adversarial_accuracy": report.adversarial_accuracy,
        "robust_accuracy_given_clean_correct": report.robust_accuracy_given_clean_correct,
        "mean_l2": report.mean_l2, "median_l2": report.median_l2,
        "mean_linf": report.mean_linf, "median_linf": report.median_linf,
        "mean_nuclear": report.mean_nuclear, "median_nuclear": report.median_nuclear,
        "mean_nonzero_pixels": report.mean_nonzero_pixels,
        "samples": [{
            "index": s.index,
            "clean_correct": s.clean_correct,
            "adv_correct": s.adv_correct,
            "first_success_iter": s.first_success_iter,
            "l2": s.l2, "linf": s.linf, "nuclear": s.nuclear,
            "nonzero_pixels": s.nonzero_pixels,
            "fw_gap": s.fw_gap,
            "pre_clamp_ball_norm": s.pre_clamp_ball_norm,
        } for s in report.samples],
    }


def report_json_text(reports, series=None):
    doc = {"reports": [_report_to_dict(r) for r in reports]}
    if series is not None:
        doc["accuracy_vs_radius"] = series
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def csv_text_from_report_doc(doc):
    """report.csv derived purely from the report.json structure, so the two
    stay byte-consistent."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in doc["reports"]:
        for s in report["samples"]:
            writer.writerow([
                s["index"], int(s["clean_correct"]), int(s["adv_correct"]),
                "" if s["first_success_iter"] is None else s["first_success_iter"],
                repr(s["l2"]), repr(s["linf"]), repr(s["nuclear"]),
                s["nonzero_pixels"]])
    return buf.getvalue()


def write_report(reports, out_dir, series=None, runtime_seconds=None):
    """Write report.json and report.csv (deterministic bytes); the wall-clock
    runtime goes to a sidecar so reruns with equal seeds stay byte-identical."""
    os.makedirs(out_dir, exist_ok=True)
    text = report_json_text(reports, series=series)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(text)
    doc = json.loads(text)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text_from_report_doc(doc))
    meta = {"runtime_seconds": sum(r.runtime_seconds for r in reports)
            if runtime_seconds is None else runtime_seconds}
    with open(os.path.join(out_dir, "report_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh)
