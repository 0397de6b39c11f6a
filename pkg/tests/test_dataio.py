import json
import struct

import numpy as np
import pytest

from structadv import dataio
from structadv.dataio import (CSV_COLUMNS, Dataset, csv_text_from_report_doc,
                              parse_idx, read_tensor_stack, render_perturbation,
                              report_json_text, synth_dataset, write_idx,
                              write_images, write_pnm, write_report,
                              write_tensor_stack)
from structadv.harness import AggregateReport, SampleResult


def idx_fixture(tmp_path):
    """The documented reference pair: 2 images of 2x2 pixels and 2 labels."""
    images = tmp_path / "imgs.idx"
    labels = tmp_path / "lbls.idx"
    images.write_bytes(struct.pack(">iiii", 0x00000803, 2, 2, 2)
                       + bytes([0, 255, 128, 64, 255, 0, 0, 0]))
    labels.write_bytes(struct.pack(">ii", 0x00000801, 2) + bytes([7, 1]))
    return str(images), str(labels)


def parse_pnm(path):
    """Independent minimal PNM reader used as the oracle for write_pnm."""
    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    magic, dims, maxval, payload = parts[0], parts[1], parts[2], parts[3]
    w, h = (int(t) for t in dims.split())
    assert maxval == b"255"
    data = np.frombuffer(payload, dtype=np.uint8)
    if magic == b"P5":
        return data.reshape(h, w)
    assert magic == b"P6"
    return data.reshape(h, w, 3)


class TestIdx:
    def test_reference_fixture(self, tmp_path):
        ds = parse_idx(*idx_fixture(tmp_path))
        assert ds.images.shape == (2, 1, 2, 2)
        assert ds.images[0, 0, 0, 0] == 0.0
        assert ds.images[0, 0, 0, 1] == 1.0
        assert ds.images[0, 0, 1, 0] == pytest.approx(128 / 255, abs=1e-9)
        assert ds.images[0, 0, 1, 1] == pytest.approx(64 / 255, abs=1e-9)
        assert np.array_equal(ds.images[1], np.array([[[1.0, 0.0], [0.0, 0.0]]]))
        assert list(ds.labels) == [7, 1]

    def test_bad_image_magic(self, tmp_path):
        imgs, lbls = idx_fixture(tmp_path)
        raw = bytearray(open(imgs, "rb").read())
        raw[3] = 0x01
        open(imgs, "wb").write(bytes(raw))
        with pytest.raises(ValueError, match="magic.*byte 0"):
            parse_idx(imgs, lbls)

    def test_truncated_payload_reports_offset(self, tmp_path):
        imgs, lbls = idx_fixture(tmp_path)
        raw = open(imgs, "rb").read()
        open(imgs, "wb").write(raw[:-3])
        with pytest.raises(ValueError, match="byte 16"):
            parse_idx(imgs, lbls)

    def test_count_mismatch(self, tmp_path):
        imgs, lbls = idx_fixture(tmp_path)
        open(lbls, "wb").write(struct.pack(">ii", 0x00000801, 3) + bytes([7, 1, 0]))
        with pytest.raises(ValueError, match="mismatch"):
            parse_idx(imgs, lbls)

    def test_label_out_of_range(self, tmp_path):
        imgs, lbls = idx_fixture(tmp_path)
        with pytest.raises(ValueError, match="outside"):
            parse_idx(imgs, lbls, num_classes=5)

    def test_roundtrip_bit_identical(self, tmp_path):
        imgs, lbls = idx_fixture(tmp_path)
        ds = parse_idx(imgs, lbls)
        out_i, out_l = str(tmp_path / "o.idx"), str(tmp_path / "ol.idx")
        write_idx(ds, out_i, out_l)
        assert open(out_i, "rb").read() == open(imgs, "rb").read()
        assert open(out_l, "rb").read() == open(lbls, "rb").read()

    def test_multichannel_refused(self, tmp_path):
        ds = Dataset(np.zeros((1, 3, 2, 2)), np.zeros(1, dtype=np.int64), 10)
        with pytest.raises(ValueError, match="single-channel"):
            write_idx(ds, str(tmp_path / "a"), str(tmp_path / "b"))


class TestTensorStack:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        arr = rng.standard_normal((4, 1, 5, 5))
        path = str(tmp_path / "x.tns")
        write_tensor_stack(path, arr)
        back = read_tensor_stack(path)
        assert np.array_equal(arr, back)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.tns"
        path.write_bytes(struct.pack(">iiiii", 0x1234, 1, 1, 1, 1) + b"\0" * 8)
        with pytest.raises(ValueError, match="magic"):
            read_tensor_stack(str(path))

    def test_truncation_detected(self, tmp_path):
        path = str(tmp_path / "x.tns")
        write_tensor_stack(path, np.zeros((1, 1, 2, 2)))
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-1])
        with pytest.raises(ValueError, match="byte 20"):
            read_tensor_stack(path)


class TestSynthetic:
    def test_deterministic(self):
        a = synth_dataset("bars", 20, seed=5, shape=(1, 10, 10))
        b = synth_dataset("bars", 20, seed=5, shape=(1, 10, 10))
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_range_and_shapes(self):
        for kind in ("blobs", "bars"):
            ds = synth_dataset(kind, 15, seed=2, shape=(1, 10, 10), num_classes=4)
            assert ds.images.shape == (15, 1, 10, 10)
            assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
            assert ds.labels.min() >= 0 and ds.labels.max() < 4

    def test_blobs_zero_noise_collapse_to_prototypes(self):
        ds = synth_dataset("blobs", 30, seed=7, shape=(1, 4, 4), num_classes=3, noise=0.0)
        for y in range(3):
            imgs = ds.images[ds.labels == y]
            if len(imgs) > 1:
                assert np.allclose(imgs, imgs[0])

    def test_bars_have_bright_bar(self):
        ds = synth_dataset("bars", 30, seed=9, shape=(1, 20, 20), noise=0.0)
        for img in ds.images:
            # the two bar lines are well above the 0.12 background
            flat = np.sort(img.ravel())
            assert flat[-1] >= 0.55
            assert flat[0] == pytest.approx(0.12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            synth_dataset("spirals", 5, seed=0)


class TestPnm:
    def test_pgm_against_independent_parser(self, tmp_path):
        rng = np.random.default_rng(11)
        x = rng.uniform(size=(1, 4, 6))
        path = str(tmp_path / "a.pgm")
        write_pnm(path, x)
        got = parse_pnm(path)
        want = np.clip(np.round(x[0] * 255), 0, 255).astype(np.uint8)
        assert np.array_equal(got, want)

    def test_ppm_channel_order(self, tmp_path):
        x = np.zeros((3, 1, 2))
        x[0, 0, 0] = 1.0   # pixel 0 pure red
        x[2, 0, 1] = 1.0   # pixel 1 pure blue
        path = str(tmp_path / "a.ppm")
        write_pnm(path, x)
        got = parse_pnm(path)
        assert list(got[0, 0]) == [255, 0, 0]
        assert list(got[0, 1]) == [0, 0, 255]

    def test_two_channels_refused(self, tmp_path):
        with pytest.raises(ValueError, match="channels"):
            write_pnm(str(tmp_path / "x"), np.zeros((2, 2, 2)))

    def test_render_perturbation_zero_is_uniform_128(self):
        assert np.all(render_perturbation(np.zeros((1, 3, 3))) == 128)

    def test_render_perturbation_extremes(self):
        delta = np.array([[[-0.2, 0.0, 0.2]]])
        out = render_perturbation(delta)
        assert list(out[0, 0]) == [1, 128, 255]

    def test_write_images_names(self, tmp_path):
        x = np.full((1, 2, 2), 0.5)
        write_images(x, x, np.zeros_like(x), str(tmp_path), 7)
        for tag in ("original", "adversarial", "perturbation"):
            assert (tmp_path / f"sample00007_{tag}.pnm").exists()


def tiny_report():
    samples = [
        SampleResult(index=0, clean_correct=True, adv_correct=False,
                     first_success_iter=3, l2=0.5, linf=0.1, nuclear=0.7,
                     nonzero_pixels=12, fw_gap=0.01, pre_clamp_ball_norm=0.9),
        SampleResult(index=1, clean_correct=True, adv_correct=True,
                     first_success_iter=None, l2=0.25, linf=0.05, nuclear=0.3,
                     nonzero_pixels=4),
    ]
    return AggregateReport(config={"method": "FWnucl", "radius": 1.0},
                           clean_accuracy=100.0, adversarial_accuracy=50.0,
                           robust_accuracy_given_clean_correct=50.0,
                           mean_l2=0.375, median_l2=0.375,
                           mean_linf=0.075, median_linf=0.075,
                           mean_nuclear=0.5, median_nuclear=0.5,
                           mean_nonzero_pixels=8.0, samples=samples,
                           runtime_seconds=1.25)


class TestReports:
    def test_json_deterministic_and_sorted(self):
        a = report_json_text([tiny_report()])
        b = report_json_text([tiny_report()])
        assert a == b
        doc = json.loads(a)
        keys = list(doc["reports"][0])
        assert keys == sorted(keys)
        assert "runtime" not in a  # runtime lives in the sidecar only

    def test_csv_regenerates_from_json_doc(self):
        doc = json.loads(report_json_text([tiny_report()]))
        text = csv_text_from_report_doc(doc)
        lines = text.splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 3
        assert lines[1] == "0,1,0,3,0.5,0.1,0.7,12"
        assert lines[2] == "1,1,1,,0.25,0.05,0.3,4"

    def test_write_report_files_byte_identical_across_runs(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        write_report([tiny_report()], str(d1), runtime_seconds=1.0)
        write_report([tiny_report()], str(d2), runtime_seconds=99.0)
        for name in ("report.json", "report.csv"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
        meta = json.loads((d2 / "report_meta.json").read_text())
        assert meta == {"runtime_seconds": 99.0}

    def test_series_included(self, tmp_path):
        series = {"method": "FWnucl", "radii": [1.0, 3.0],
                  "adversarial_accuracy": [80.0, 20.0]}
        text = report_json_text([tiny_report()], series=series)
        assert json.loads(text)["accuracy_vs_radius"] == series

    def test_csv_row_count_matches_samples(self, tmp_path):
        rep = tiny_report()
        write_report([rep, rep], str(tmp_path))
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * len(rep.samples)
