import math
from fractions import Fraction

import numpy as np
import pytest
from skimage.morphology import skeletonize

from t2t_binformer import metrics as M
from t2t_binformer import thresholding as TH

# ---------------------------------------------------------------------------
# brute-force oracles: explicit per-pixel loops, no vectorisation


def naive_counts(pred, gt):
    tp = fp = fn = tn = 0
    for y in range(gt.shape[0]):
        for x in range(gt.shape[1]):
            p, g = pred[y, x] == 0, gt[y, x] == 0
            tp += p and g
            fp += p and not g
            fn += (not p) and g
            tn += (not p) and (not g)
    return tp, fp, fn, tn


def naive_psnr(pred, gt):
    wrong = sum(int(pred[y, x] != gt[y, x]) for y in range(gt.shape[0]) for x in range(gt.shape[1]))
    return math.inf if wrong == 0 else 10 * math.log10(gt.size / wrong)


def _conventional_ratio(num, den, other_empty):
    return num / den if den else (1.0 if other_empty else 0.0)


def _f(p, r):
    return 0.0 if p + r == 0 else 200 * p * r / (p + r)


def naive_fm(pred, gt):
    tp, fp, fn, _ = naive_counts(pred, gt)
    p = _conventional_ratio(tp, tp + fp, tp + fn == 0)
    r = _conventional_ratio(tp, tp + fn, tp + fp == 0)
    return _f(p, r)


def naive_weights(gt):
    h, w = gt.shape
    text = gt == 0
    prec = np.ones((h, w))
    for y in range(h):
        for x in range(w):
            if text[y, x]:
                continue
            near = any(text[yy, xx] for yy in range(max(0, y - 1), min(h, y + 2))
                       for xx in range(max(0, x - 1), min(w, x + 2)))
            if near:
                prec[y, x] = 0.5
    return M.PseudoWeights(skeletonize(text).astype(float), prec)


def naive_fps(pred, gt, weights):
    rn = rd = pn = pd = 0.0
    any_pred = any_gt = False
    for y in range(gt.shape[0]):
        for x in range(gt.shape[1]):
            p, g = pred[y, x] == 0, gt[y, x] == 0
            any_pred |= p
            any_gt |= g
            if g:
                rd += weights.recall[y, x]
                if p:
                    rn += weights.recall[y, x]
            if p:
                pd += weights.precision[y, x]
                if g:
                    pn += weights.precision[y, x]
    r = _conventional_ratio(rn, rd, not any_pred)
    p = _conventional_ratio(pn, pd, not any_gt)
    return _f(p, r)


def naive_drd(pred, gt):
    h, w = gt.shape
    nub = 0
    for by in range(0, h, 8):
        for bx in range(0, w, 8):
            vals = {gt[y, x] for y in range(by, min(by + 8, h)) for x in range(bx, min(bx + 8, w))}
            nub += len(vals) > 1
    wsum = sum(1 / math.hypot(i, j) for i in range(-2, 3) for j in range(-2, 3) if (i, j) != (0, 0))
    total, flips = 0.0, 0
    for y in range(h):
        for x in range(w):
            if pred[y, x] == gt[y, x]:
                continue
            flips += 1
            for i in range(-2, 3):
                for j in range(-2, 3):
                    if (i, j) == (0, 0) or not (0 <= y + i < h and 0 <= x + j < w):
                        continue
                    if gt[y + i, x + j] != pred[y, x]:
                        total += (1 / math.hypot(i, j)) / wsum
    if flips == 0:
        return 0.0
    return math.inf if nub == 0 else total / nub


def random_pair(rng, shape=(64, 64)):
    gt = (rng.random(shape) > rng.uniform(0.1, 0.4)).astype(np.uint8)
    flip = rng.random(shape) < rng.uniform(0.0, 0.2)
    pred = np.where(flip, 1 - gt, gt).astype(np.uint8)
    return pred, gt


# ---------------------------------------------------------------------------


class TestPSNR:
    def test_identical_is_sentinel(self):
        gt = np.ones((4, 4), dtype=np.uint8)
        assert M.psnr(gt, gt) == math.inf

    def test_all_flipped(self):
        gt = np.random.default_rng(0).integers(0, 2, (8, 8))
        assert M.psnr(1 - gt, gt) == 0.0

    def test_half_flipped(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        pred = gt.copy()
        pred[:2] = 1
        assert M.psnr(pred, gt) == pytest.approx(3.0103, abs=1e-4)
        assert M.psnr(pred, gt) == pytest.approx(10 * math.log10(2), rel=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            M.psnr(np.ones((2, 2)), np.ones((2, 3)))

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            M.psnr(np.full((2, 2), 0.5), np.ones((2, 2)))


class TestFMeasure:
    def test_perfect(self):
        gt = np.random.default_rng(1).integers(0, 2, (10, 10))
        assert M.f_measure(gt, gt) == 100.0

    def test_all_text_vs_half_text(self):
        gt = np.ones((4, 4), dtype=np.uint8)
        gt[:, :2] = 0
        pred = np.zeros((4, 4), dtype=np.uint8)
        assert naive_counts(pred, gt)[:3] == (8, 8, 0)  # P = 0.5, R = 1
        assert M.f_measure(pred, gt) == pytest.approx(200 / 3, rel=1e-15)

    def test_no_predicted_text(self):
        gt = np.ones((4, 4), dtype=np.uint8)
        gt[0, 0] = 0
        assert M.f_measure(np.ones((4, 4), dtype=np.uint8), gt) == 0.0

    def test_both_empty(self):
        blank = np.ones((4, 4), dtype=np.uint8)
        assert M.f_measure(blank, blank) == 100.0

    def test_class_swap_changes_fm(self):
        pred, gt = random_pair(np.random.default_rng(5))
        assert M.f_measure(1 - pred, 1 - gt) != pytest.approx(M.f_measure(pred, gt))


class TestPseudoFMeasure:
    def glyph(self):
        gt = np.ones((16, 16), dtype=np.uint8)
        gt[3:13, 4:7] = 0  # vertical stroke
        gt[3:6, 4:12] = 0  # top bar
        gt[8:10, 7:11] = 0  # middle bar
        return gt

    def test_perfect(self):
        gt = self.glyph()
        assert M.pseudo_f_measure(gt, gt) == 100.0

    def test_unit_weights_reduce_to_fm(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pred, gt = random_pair(rng, (20, 20))
            unit = M.PseudoWeights(np.ones(gt.shape), np.ones(gt.shape))
            assert M.pseudo_f_measure(pred, gt, unit) == M.f_measure(pred, gt)

    def test_crafted_glyph_matches_oracle(self):
        gt = self.glyph()
        pred = gt.copy()
        pred[3:13, 4] = 1  # thinned stroke: misses a column
        pred[2, 4:12] = 0  # halo above the bar
        pred[14, 14] = 0  # isolated speck
        w = naive_weights(gt)
        expected = naive_fps(pred, gt, w)
        assert M.pseudo_f_measure(pred, gt) == pytest.approx(expected, abs=1e-12)
        assert 0 < expected < 100

    def test_weights_construction(self):
        gt = self.glyph()
        w, ref = M.pseudo_weights(gt), naive_weights(gt)
        np.testing.assert_array_equal(w.precision, ref.precision)
        assert set(np.unique(w.recall)) <= {0.0, 1.0}
        assert np.all(gt[w.recall > 0] == 0)  # skeleton lies on text


class TestDRD:
    def test_weight_matrix(self):
        w = M.drd_weights()
        assert w.shape == (5, 5)
        assert w[2, 2] == 0
        np.testing.assert_array_equal(w, w.T)
        np.testing.assert_array_equal(w, w[::-1, ::-1])
        assert abs(w.sum() - 1.0) <= 1e-12
        assert w[2, 3] == pytest.approx(1 / sum(1 / math.hypot(i, j) for i in range(-2, 3)
                                                for j in range(-2, 3) if (i, j) != (0, 0)))

    def test_identical(self):
        gt = np.random.default_rng(0).integers(0, 2, (16, 16))
        assert M.drd(gt, gt) == 0.0

    def crafted(self):
        gt = np.ones((24, 24), dtype=np.uint8)
        gt[2, 2] = 0  # only block (0, 0) is non-uniform
        return gt

    def test_single_flip_in_uniform_region(self):
        gt = self.crafted()
        assert M.nubn(gt) == 1
        pred = gt.copy()
        pred[12, 12] = 0
        assert naive_drd(pred, gt) == pytest.approx(1.0, abs=1e-12)
        assert M.drd(pred, gt) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_flips_add(self):
        gt = self.crafted()
        one, two = gt.copy(), gt.copy()
        one[12, 12] = 0
        two[12, 12] = two[12, 19] = 0
        assert M.drd(two, gt) == pytest.approx(2 * M.drd(one, gt), rel=1e-15)

    def test_no_nonuniform_blocks(self):
        gt = np.ones((8, 8), dtype=np.uint8)
        pred = gt.copy()
        pred[3, 3] = 0
        assert M.drd(gt, gt) == 0.0
        assert M.drd(pred, gt) == math.inf


def test_metrics_match_brute_force_oracles():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        pred, gt = random_pair(rng)
        assert M.psnr(pred, gt) == pytest.approx(naive_psnr(pred, gt), abs=1e-9)
        assert M.f_measure(pred, gt) == pytest.approx(naive_fm(pred, gt), abs=1e-9)
        assert M.drd(pred, gt) == pytest.approx(naive_drd(pred, gt), abs=1e-9)
        w = naive_weights(gt)
        assert M.pseudo_f_measure(pred, gt) == pytest.approx(naive_fps(pred, gt, w), abs=1e-9)


# ---------------------------------------------------------------------------


def exhaustive_otsu(hist):
    """Scan every threshold with exact rational class statistics."""
    total = sum(hist)
    occupied = [i for i, c in enumerate(hist) if c]
    if len(occupied) == 1:
        return occupied[0]
    best, best_t = Fraction(-1), None
    for t in range(1, 256):
        n0, n1 = sum(hist[:t]), sum(hist[t:])
        if n0 == 0 or n1 == 0:
            score = Fraction(0)
        else:
            mu0 = Fraction(sum(i * hist[i] for i in range(t)), n0)
            mu1 = Fraction(sum(i * hist[i] for i in range(t, 256)), n1)
            score = Fraction(n0, total) * Fraction(n1, total) * (mu0 - mu1) ** 2
        if score > best:
            best, best_t = score, t
    return best_t


class TestOtsu:
    def test_two_spikes(self):
        hist = [0] * 256
        hist[50] = hist[200] = 1000
        t = TH.otsu_threshold(hist)
        assert 50 < t <= 200
        assert t == exhaustive_otsu(hist) == 51

    def test_constant_image(self):
        img = np.full((8, 8), 100 / 255)
        t, binary = TH.otsu(img)
        assert t == 100
        assert np.unique(binary).size == 1

    def test_doubling_counts(self):
        hist = np.random.default_rng(3).integers(0, 50, 256)
        assert TH.otsu_threshold(hist) == TH.otsu_threshold(2 * hist)

    def test_random_histograms_match_exhaustive(self):
        rng = np.random.default_rng(11)
        for i in range(50):
            if i % 2:
                hist = rng.integers(0, 100, 256)
            else:  # bimodal with sparse support
                hist = np.zeros(256, dtype=int)
                idx = rng.choice(256, size=rng.integers(2, 20), replace=False)
                hist[idx] = rng.integers(1, 500, idx.size)
            hist = [int(c) for c in hist]
            assert TH.otsu_threshold(hist) == exhaustive_otsu(hist)

    def test_binary_separates_dark_text(self):
        img = np.full((10, 10), 0.9)
        img[2:4, 2:8] = 0.1
        _, binary = TH.otsu(img)
        assert np.all(binary[2:4, 2:8] == 0) and binary.sum() == 100 - 12


def naive_window_mean(img, w):
    h, wd = img.shape
    r = w // 2
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(wd):
            vals = [img[min(max(y + i, 0), h - 1), min(max(x + j, 0), wd - 1)]
                    for i in range(-r, r + 1) for j in range(-r, r + 1)]
            out[y, x] = sum(vals) / len(vals)
    return out


class TestLocalThresholds:
    def test_integral_means_match_naive(self):
        rng = np.random.default_rng(4)
        for w in (3, 5, 9):
            img = rng.random((32, 32))
            mean, std = TH.window_stats(img, w)
            np.testing.assert_allclose(mean, naive_window_mean(img, w), atol=1e-10)
            np.testing.assert_allclose(std ** 2, naive_window_mean(img * img, w) - naive_window_mean(img, w) ** 2,
                                       atol=1e-10)

    def test_sauvola_flat(self):
        m = 100 / 255
        thr = TH.sauvola_threshold(np.full((9, 9), m), w=5, k=0.2)
        np.testing.assert_allclose(thr, 0.8 * m, rtol=1e-12)

    def test_niblack_k0_is_local_mean(self):
        img = np.random.default_rng(5).random((16, 16))
        np.testing.assert_allclose(TH.niblack_threshold(img, 7, k=0.0), naive_window_mean(img, 7), atol=1e-12)
        np.testing.assert_array_equal(TH.niblack(img, 7, k=0.0), (img > naive_window_mean(img, 7)).astype(np.uint8))

    def test_bradley_rule(self):
        img = np.random.default_rng(6).random((24, 24))
        mean = naive_window_mean(img, 5)
        np.testing.assert_array_equal(TH.bradley(img, 5, t=0.15), (img >= mean * 0.85).astype(np.uint8))
        assert TH.bradley_window((256, 256)) == 33

    @pytest.mark.parametrize("w", [1, 2, 4, 0, -3])
    def test_invalid_window(self, w):
        with pytest.raises(ValueError):
            TH.window_stats(np.zeros((8, 8)), w)

    def test_baselines_find_text(self):
        img = np.full((64, 64), 0.85)
        img[20:24, 10:50] = 0.1
        for name, method in TH.BASELINES.items():
            binary = method(img)
            assert binary.shape == img.shape and set(np.unique(binary)) <= {0, 1}
            assert binary[20:24, 12:48].mean() < 0.2, name


class TestReport:
    def test_perfect(self):
        gt = np.ones((16, 16), dtype=np.uint8)
        gt[4:9, 5:11] = 0
        assert M.evaluate_pair(gt, gt) == M.MetricsReport(math.inf, 100.0, 100.0, 0.0)

    def test_fields_match_individual_metrics(self):
        pred, gt = random_pair(np.random.default_rng(8))
        r = M.evaluate_pair(pred, gt)
        assert (r.psnr, r.fm, r.fps, r.drd) == (M.psnr(pred, gt), M.f_measure(pred, gt),
                                                 M.pseudo_f_measure(pred, gt), M.drd(pred, gt))

    def test_mean_of_identical(self):
        pred, gt = random_pair(np.random.default_rng(9))
        r = M.evaluate_pair(pred, gt)
        m = M.mean_report([r] * 5)
        assert m.psnr == pytest.approx(r.psnr, rel=1e-15) and m.fm == pytest.approx(r.fm, rel=1e-15)
        assert m.fps == pytest.approx(r.fps, rel=1e-15) and m.drd == pytest.approx(r.drd, rel=1e-15)

    def test_csv(self):
        lines = M.csv_lines(M.MetricsReport(math.inf, 100.0, 100.0, 0.0))
        assert lines[0] == "psnr,fm,fps,drd"
        assert lines[1] == "inf,100.0000,100.0000,0.0000"

    def test_markdown_table(self):
        r = M.MetricsReport(15.3, 78.6, 80.5, 0.55)
        table = M.format_table([("Otsu", "Thresh.", r), ("T2T-BinFormer", "Transformer", r)], "md")
        lines = table.strip().splitlines()
        assert [c.strip() for c in lines[0].strip("|").split("|")] == list(M.TABLE_HEADER)
        assert len(lines) == 4 and "T2T-BinFormer" in lines[3]
        csv = M.format_table([("Otsu", "Thresh.", r)], "csv").splitlines()
        assert csv == ["Method,Model,PSNR,FM,Fps,DRD", "Otsu,Thresh.,15.3000,78.6000,80.5000,0.5500"]
