import numpy as np
import pytest

from monobev import figures
from monobev.evaluation import EvaluationReport


def _report():
    return EvaluationReport(
        {"drivable": 0.8, "crossing": 0.2, "walkway": 0.5, "carpark": 0.3,
         "car": 0.4, "truck": 0.6, "pedestrian": 0.1},
        0.45, 0.4142857142857143, np.arange(16).reshape(4, 4), 1000,
    )


class TestFigureFiles:
    def test_loss_curves(self, tmp_path):
        out = tmp_path / "loss.png"
        history = {"image_static": [0.5, 0.4, 0.3], "bev_static": [0.6, 0.2, 0.1]}
        figures.save_loss_curves(out, history)
        assert out.exists() and out.stat().st_size > 1000

    def test_iou_bars(self, tmp_path):
        out = tmp_path / "iou.png"
        figures.save_iou_bars(out, _report())
        assert out.exists() and out.stat().st_size > 1000

    def test_confusion_heatmap(self, tmp_path):
        out = tmp_path / "confusion.png"
        figures.save_confusion_heatmap(out, np.arange(16).reshape(4, 4) * 1000)
        assert out.exists() and out.stat().st_size > 1000

    def test_confusion_heatmap_all_zero(self, tmp_path):
        out = tmp_path / "confusion0.png"
        figures.save_confusion_heatmap(out, np.zeros((4, 4), dtype=int))
        assert out.exists()

    def test_trend_numeric_axis(self, tmp_path):
        out = tmp_path / "trend.png"
        figures.save_trend(out, "frames", [1, 2, 3], [_report()] * 3)
        assert out.exists() and out.stat().st_size > 1000

    def test_trend_label_axis(self, tmp_path):
        out = tmp_path / "trend_labels.png"
        figures.save_trend(out, "components", ["Img", "BEV"], [_report()] * 2)
        assert out.exists() and out.stat().st_size > 1000


class TestOverlay:
    def test_colors(self):
        pred = np.array([[1, 0], [1, 0]], dtype=bool)
        true = np.array([[1, 1], [0, 0]], dtype=bool)
        mask = np.array([[1, 1], [1, 0]], dtype=bool)
        img = figures.error_overlay(pred, true, mask)
        np.testing.assert_allclose(img[0, 0], (0.1, 0.8, 0.1))   # hit
        np.testing.assert_allclose(img[0, 1], (0.15, 0.25, 0.9))  # miss
        np.testing.assert_allclose(img[1, 0], (0.9, 0.15, 0.1))   # false alarm
        np.testing.assert_allclose(img[1, 1], (0.15, 0.15, 0.15))  # unmasked

    def test_true_negative_stays_gray(self):
        zero = np.zeros((3, 3), dtype=bool)
        img = figures.error_overlay(zero, zero, ~zero)
        np.testing.assert_allclose(img, np.full((3, 3, 3), 0.35))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            figures.error_overlay(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))
