"""Result-file writers: schema headers, round trips, figures, overlays."""

import numpy as np
import pytest
from PIL import Image

import sparseseg.report as rp
from sparseseg.bench import FpsResult
from sparseseg.diffcore import ConfigError
from sparseseg.evaluator import APReport, PRSample


def test_loss_curve_round_trip_is_exact(tmp_path):
    records = [
        (0, 9.432214736938477, 0.78, 0.512711539864541, 3.18, 0.4789),
        (1, 5.815076351165771, 0.80, 0.7831624448299408, 1.19, 0.2503),
    ]
    path = tmp_path / "curve.csv"
    rp.write_loss_curve(path, records)
    assert rp.read_loss_curve(path) == records


def test_loss_curve_has_versioned_header(tmp_path):
    path = tmp_path / "curve.csv"
    rp.write_loss_curve(path, [(0, 1.0, 0.1, 0.2, 0.3, 0.4)])
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema: sparseseg.loss_curve.v1"
    assert lines[1] == "iteration,total,cls,dice,bce,obj"


def test_read_rejects_wrong_schema(tmp_path):
    path = tmp_path / "curve.csv"
    path.write_text("# schema: sparseseg.sweep.v1\nn,fps,ap50\n")
    with pytest.raises(rp.ReportError, match="expected first line"):
        rp.read_loss_curve(path)


def test_read_rejects_malformed_row(tmp_path):
    path = tmp_path / "curve.csv"
    path.write_text("# schema: sparseseg.loss_curve.v1\nheader\n1,2.0\n")
    with pytest.raises(rp.ReportError, match="bad loss-curve row"):
        rp.read_loss_curve(path)


def test_sweep_round_trip(tmp_path):
    records = [rp.TradeoffRecord(100, 57.25, 0.91),
               rp.TradeoffRecord(300, 31.0, 0.94)]
    path = tmp_path / "sweep.csv"
    rp.write_sweep_csv(path, records)
    assert rp.read_sweep_csv(path) == records


def _fake_report():
    sample = (PRSample(score=0.9, recall=0.5, precision=1.0),)
    return APReport(
        ap50=0.75, ap=0.6,
        ap_small=1.0, ap_medium=0.5, ap_large=0.25,
        ap_small_50=1.0, ap_medium_50=0.5, ap_large_50=0.3,
        gt_counts={"small": 0, "medium": 4, "large": 8},
        pr_curves={"overall": sample, "small": (), "medium": sample,
                   "large": ()},
    )


def test_eval_report_lines(tmp_path):
    path = tmp_path / "eval.txt"
    rp.write_eval_report(path, _fake_report())
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema: sparseseg.eval_report.v1"
    assert "ap50=0.750000" in lines
    assert "ap_medium=0.500000" in lines
    assert "count_small=0" in lines
    assert "total_gt=12" in lines


def test_pr_curve_rows(tmp_path):
    path = tmp_path / "pr.csv"
    rp.write_pr_curves(path, _fake_report())
    lines = path.read_text().splitlines()
    assert lines[1] == "stratum,score,recall,precision"
    body = lines[2:]
    assert len(body) == 2  # overall + medium each hold one sample
    assert body[0].startswith("overall,0.9,")


@pytest.mark.parametrize("fps,label", [(96.0, "yes"), (29.9, "no")])
def test_fps_report_real_time_label(tmp_path, fps, label):
    result = FpsResult(images_processed=10, wall_seconds=10.0 / fps, fps=fps,
                       p50_ms=1.0, p90_ms=2.0, p99_ms=3.0, warmup_count=3,
                       latencies_ms=(1.0,) * 10)
    path = tmp_path / "fps.txt"
    rp.write_fps_report(path, result)
    text = path.read_text()
    assert f"real_time={label}" in text
    assert "warmup_count=3" in text


def test_sweep_curve_is_vector_graphic(tmp_path):
    records = [rp.TradeoffRecord(100, 60.0, 0.8),
               rp.TradeoffRecord(300, 40.0, 0.85),
               rp.TradeoffRecord(500, 25.0, 0.86)]
    path = tmp_path / "sweep.svg"
    rp.render_sweep_curve(path, records)
    head = path.read_text()[:500]
    assert "<svg" in head


def test_palette_colors_are_distinct():
    palette = rp.instance_palette(24)
    assert palette.shape == (24, 3)
    assert len({tuple(c) for c in palette}) == 24


def test_overlay_blends_only_masked_pixels():
    image = np.full((3, 8, 8), 0.5, dtype=np.float32)
    mask = np.zeros((8, 8), dtype=bool)
    mask[:4, :4] = True
    out = rp.render_overlay(image, [mask])
    assert out.shape == (8, 8, 3)
    assert out.dtype == np.uint8
    assert (out[~mask] == 128).all()
    assert (out[mask] != out[~mask][0]).any()


def test_overlay_rejects_undersized_mask():
    image = np.zeros((3, 8, 8), dtype=np.float32)
    with pytest.raises(ConfigError, match="extent"):
        rp.render_overlay(image, [np.zeros((4, 4), dtype=bool)])


def test_overlay_rejects_channel_last_image():
    with pytest.raises(ConfigError, match="3, H, W"):
        rp.render_overlay(np.zeros((8, 8, 3)), [])


def test_save_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
    path = tmp_path / "img.png"
    rp.save_png(path, arr)
    with Image.open(path) as img:
        back = np.asarray(img)
    assert (back == arr).all()
