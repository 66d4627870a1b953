import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import enumerate_edit_alignments
from umaseq import ctc
from umaseq import model
from umaseq import synthdata as sd
from umaseq import traineval as te
from umaseq import uma


def tiny_model(**overrides):
    base = dict(
        d_in=8, d_model=16, n_heads=2, n_encoder_blocks=2, n_decoder_blocks=1,
        d_ff=24, subsample=4, vocab=6, enc_selfcond=(1, 2), dec_selfcond=(1,), seed=0,
    )
    base.update(overrides)
    return model.ModelConfig(**base)


def tiny_data(**overrides):
    base = dict(vocab=6, d_in=8, tokens_range=(2, 4), seed=0)
    base.update(overrides)
    return sd.SynthConfig(**base)


class TestSchedule:
    def test_peak_at_warmup(self):
        cfg = te.TrainConfig(peak_lr=2e-3, warmup_steps=400)
        assert te.lr_at(400, cfg) == pytest.approx(2e-3, rel=1e-12)

    def test_half_peak_at_half_warmup(self):
        cfg = te.TrainConfig(peak_lr=2e-3, warmup_steps=400)
        assert te.lr_at(200, cfg) == pytest.approx(1e-3, rel=1e-12)

    def test_inverse_sqrt_after_warmup(self):
        cfg = te.TrainConfig(peak_lr=1e-3, warmup_steps=100)
        assert te.lr_at(400, cfg) == pytest.approx(1e-3 * 0.5, rel=1e-12)


class TestTotalLoss:
    def _trace(self, mcfg, x):
        params = model.init_params(mcfg)
        return model.model_forward(params, x)

    def test_no_conditioning_equals_plain_ctc(self):
        mcfg = tiny_model(enc_selfcond=(), dec_selfcond=())
        x = np.random.default_rng(0).normal(size=(24, 8))
        trace = self._trace(mcfg, x)
        cfg = te.TrainConfig(lambda_final=1.0, lambda_inter=0.1)
        target = [1]
        assert te.total_loss(trace, target, cfg) == pytest.approx(
            ctc.ctc_loss(trace.logits.data, target).loss, abs=0)

    def test_weighted_sum_arithmetic(self):
        # equal per-head losses: total = L0 * (0.5 + n_heads * 0.1)
        mcfg = tiny_model()
        x = np.random.default_rng(1).normal(size=(24, 8))
        trace = self._trace(mcfg, x)
        target = [2]
        cfg = te.TrainConfig()
        l_final = ctc.ctc_loss(trace.logits.data, target).loss
        l_inters = [ctc.ctc_loss(lg.data, target).loss for _, lg in trace.intermediates]
        expected = 0.5 * l_final + sum(0.1 * li for li in l_inters)
        assert te.total_loss(trace, target, cfg) == pytest.approx(expected, abs=1e-12)
        assert te.total_loss_op(trace, target, cfg).item() == pytest.approx(expected, abs=1e-12)

    def test_doubling_intermediate_weight_doubles_its_share(self):
        mcfg = tiny_model()
        x = np.random.default_rng(2).normal(size=(28, 8))
        trace = self._trace(mcfg, x)
        target = [0, 3]
        base = te.TrainConfig(lambda_final=0.5, lambda_inter=0.1)
        doubled = te.TrainConfig(lambda_final=0.5, lambda_inter=0.2)
        inter_share = te.total_loss(trace, target, base) - 0.5 * ctc.ctc_loss(
            trace.logits.data, target).loss
        total_doubled = te.total_loss(trace, target, doubled)
        assert total_doubled == pytest.approx(
            0.5 * ctc.ctc_loss(trace.logits.data, target).loss + 2 * inter_share, rel=1e-12)


class TestCer:
    def test_identical_sequences(self):
        counts = te.cer([1, 2, 3], [1, 2, 3])
        assert (counts.sub, counts.dele, counts.ins, counts.cer) == (0, 0, 0, 0.0)

    def test_single_deletion(self):
        counts = te.cer([0, 1, 2], [0, 2])
        assert (counts.sub, counts.dele, counts.ins) == (0, 1, 0)
        assert counts.cer == pytest.approx(1 / 3)

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            te.cer([], [1])

    def test_cer_may_exceed_one(self):
        counts = te.cer([5], [1, 2, 3, 4])
        assert counts.cer > 1.0

    def test_distance_and_counts_match_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(120):
            ref = rng.integers(0, 4, size=rng.integers(1, 8)).tolist()
            hyp = rng.integers(0, 4, size=rng.integers(0, 8)).tolist()
            counts = te.cer(ref, hyp)
            distance, triples = enumerate_edit_alignments(tuple(ref), tuple(hyp))
            assert counts.distance == distance
            assert (counts.sub, counts.dele, counts.ins) in triples

    @settings(max_examples=150)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=8),
           st.lists(st.integers(0, 3), min_size=1, max_size=8))
    def test_symmetry_swaps_del_and_ins(self, a, b):
        fwd = te.cer(a, b)
        rev = te.cer(b, a)
        assert fwd.distance == rev.distance
        assert (fwd.sub, fwd.dele, fwd.ins) == (rev.sub, rev.ins, rev.dele)


class TestBoundaryHits:
    def test_valleys_exactly_at_boundaries(self):
        # tokens end at frames 8 and 16, subsample 4 -> downsampled 2 and 4
        seg = uma.Segmentation(valleys=(1, 2, 4), segments=((1, 3), (2, 4)), n_frames=4)
        hits, total = te.boundary_hits(seg, [(1, 8), (9, 16)], subsample=4, total_frames=16)
        assert (hits, total) == (2, 2)

    def test_endpoint_only_valleys_miss_middle_boundaries(self):
        seg = uma.Segmentation(valleys=(1, 30), segments=((1, 30),), n_frames=30)
        boundaries = [(1, 40), (41, 80), (81, 120)]
        hits, total = te.boundary_hits(seg, boundaries, subsample=4, total_frames=120)
        assert total == 3
        assert hits < 3

    def test_window_zero_requires_exact_landing(self):
        seg = uma.Segmentation(valleys=(1, 5, 9), segments=((1, 6), (5, 9)), n_frames=9)
        hits, _ = te.boundary_hits(seg, [(1, 20)], subsample=4, total_frames=36, window=0)
        assert hits == 1  # end frame 20 -> step 5


class TestEvaluate:
    def test_untrained_model_smoke(self):
        dcfg = tiny_data()
        ds = sd.gen_split(dcfg, 30)
        params = model.init_params(tiny_model())
        report = te.evaluate(params, ds.train[:20])
        assert report.n_utterances == 20
        assert report.ref_tokens > 0
        assert report.cer >= 0.0
        assert 0 < report.mean_length_ratio <= 1.0
        assert len(report.per_utterance) == 20

    def test_report_round_and_save(self, tmp_path):
        dcfg = tiny_data(seed=5)
        ds = sd.gen_split(dcfg, 10)
        params = model.init_params(tiny_model(seed=5))
        report = te.evaluate(params, ds.dev)
        text = te.format_report(report)
        assert f"{report.mean_length_ratio:.3f}" in text
        te.save_report(report, tmp_path)
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["summary"]["cer"] == report.cer
        te.save_report(report, tmp_path)  # identical bytes when repeated
        again = (tmp_path / "report.json").read_text()
        assert json.loads(again) == payload


class TestTrainLoop:
    def test_two_epoch_smoke_and_logs(self, tmp_path):
        dcfg = tiny_data(seed=6)
        ds = sd.gen_split(dcfg, 25)
        params = model.init_params(tiny_model(seed=6))
        log = io.StringIO()
        cfg = te.TrainConfig(epochs=2, warmup_steps=50, batch_size=2, seed=6)
        result = te.train(params, ds.train, ds.dev, cfg, out_dir=tmp_path, log_fp=log)
        assert result.steps > 0
        assert len(result.history) == 2
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "last.ckpt").exists()
        lines = [json.loads(line) for line in log.getvalue().splitlines()]
        step_lines = [l for l in lines if "lr" in l]
        assert step_lines and all({"step", "lr", "loss", "loss_final", "loss_inter"} <= set(l) for l in step_lines)
        epoch_lines = [l for l in lines if "dev_cer" in l]
        assert len(epoch_lines) == 2

    def test_deterministic_given_seed(self):
        dcfg = tiny_data(seed=7)
        ds = sd.gen_split(dcfg, 12)
        cfg = te.TrainConfig(epochs=1, warmup_steps=20, seed=7)
        r1 = te.train(model.init_params(tiny_model(seed=7)), ds.train, ds.dev, cfg)
        r2 = te.train(model.init_params(tiny_model(seed=7)), ds.train, ds.dev, cfg)
        assert r1.history == r2.history
        for name in r1.last_params.arrays:
            np.testing.assert_array_equal(r1.last_params.arrays[name],
                                          r2.last_params.arrays[name])

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError):
            te.train(model.init_params(tiny_model()), [], [], te.TrainConfig())

    def test_nonfinite_loss_names_utterance(self):
        dcfg = tiny_data(seed=8)
        ds = sd.gen_split(dcfg, 12)
        params = model.init_params(tiny_model(seed=8))
        params.arrays["out.b"][0] = np.nan  # poisoned checkpoint / corrupt state
        cfg = te.TrainConfig(epochs=1, warmup_steps=10, seed=8)
        with pytest.raises(te.NumericalError, match="u0000"):
            te.train(params, ds.train, ds.dev, cfg)

    def test_infeasible_targets_are_skipped_not_fatal(self):
        # force one pooled step: monotone weights via a huge positive head bias
        # cannot be arranged directly, so use long targets vs tiny inputs
        dcfg = tiny_data(seed=9, tokens_range=(4, 6), dur=(4, 5), p_silence=0.0)
        ds = sd.gen_split(dcfg, 12)
        params = model.init_params(tiny_model(seed=9))
        cfg = te.TrainConfig(epochs=1, warmup_steps=10, seed=9)
        result = te.train(params, ds.train, ds.dev, cfg)
        assert result.skipped >= 0  # smoke: completes despite short inputs
