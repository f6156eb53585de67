"""Training-path tests: sample construction, the ranking loss against closed
forms, Adam against hand-derived updates and an independent reference step,
loop determinism, checkpoint round-trips, and an end-to-end gradient check
through the loss at a reduced width."""

import json
import math

import numpy as np
import pytest

import mmrec.autodiff as ad
from mmrec.autodiff import Parameter, Tape, backward, grad_check
from mmrec.data import ImpressionSample
from mmrec.encoder import EncoderConfig
from mmrec.model import MMRecModel
from mmrec.synthetic import SyntheticConfig, generate_synthetic
from mmrec.training import (
    Adam,
    CheckpointError,
    TrainConfig,
    TrainingError,
    build_samples,
    load_checkpoint,
    nce_loss,
    save_checkpoint,
    train,
    train_step,
)


def _impression(iid, candidates, history=("h1",)):
    return ImpressionSample(
        impression_id=iid, user_id="u", history=list(history), candidates=candidates
    )


# ---------------------------------------------------------------------------
# sample construction
# ---------------------------------------------------------------------------


class TestBuildSamples:
    def test_exactly_enough_negatives_uses_each_once(self):
        imp = _impression(
            "i", [("pos", 1), ("a", 0), ("b", 0), ("c", 0), ("d", 0)]
        )
        build = build_samples([imp], k_neg=4, seed=0)
        assert len(build.samples) == 1
        s = build.samples[0]
        assert s.positive == "pos"
        assert sorted(s.negatives) == ["a", "b", "c", "d"]
        assert s.history == ["h1"]

    def test_short_impressions_sample_with_replacement(self):
        imp = _impression("i", [("pos", 1), ("a", 0), ("b", 0)])
        build = build_samples([imp], k_neg=4, seed=0)
        (s,) = build.samples
        assert len(s.negatives) == 4
        assert set(s.negatives) <= {"a", "b"}

    def test_one_sample_per_positive(self):
        imp = _impression("i", [("p1", 1), ("p2", 1), ("a", 0), ("b", 0)])
        build = build_samples([imp], k_neg=2, seed=0)
        assert [s.positive for s in build.samples] == ["p1", "p2"]
        for s in build.samples:
            assert set(s.negatives) <= {"a", "b"}

    def test_skip_counting(self):
        imps = [
            _impression("no-neg", [("p1", 1), ("p2", 1)]),
            _impression("no-pos", [("a", 0), ("b", 0)]),
            _impression("cold", [("p3", 1), ("c", 0)], history=()),
            _impression("ok", [("p4", 1), ("d", 0)]),
        ]
        build = build_samples(imps, k_neg=1, seed=0)
        assert build.skipped_no_negatives == 2
        assert build.skipped_empty_history == 1
        assert [s.positive for s in build.samples] == ["p4"]

    def test_deterministic_and_seed_sensitive(self):
        imps = [
            _impression(f"i{j}", [("pos", 1)] + [(f"n{j}-{k}", 0) for k in range(9)])
            for j in range(20)
        ]
        a = build_samples(imps, k_neg=4, seed=5)
        b = build_samples(imps, k_neg=4, seed=5)
        assert [s.negatives for s in a.samples] == [s.negatives for s in b.samples]
        c = build_samples(imps, k_neg=4, seed=6)
        assert [s.negatives for s in a.samples] != [s.negatives for s in c.samples]

    def test_k_neg_validated(self):
        with pytest.raises(ValueError, match="k_neg"):
            build_samples([], k_neg=0, seed=0)


# ---------------------------------------------------------------------------
# ranking loss
# ---------------------------------------------------------------------------


class TestNceLoss:
    def test_uniform_scores_give_log_of_candidate_count(self):
        for k in (1, 4, 9):
            loss = nce_loss(np.zeros(1 + k))
            assert float(loss.data) == pytest.approx(math.log(1 + k), abs=1e-12)
        # any constant row, not just zero
        loss = nce_loss(np.full((3, 5), 2.7))
        assert float(loss.data) == pytest.approx(math.log(5), abs=1e-12)

    def test_two_candidate_closed_form(self):
        # binary case: loss = ln(1 + e^{-(s_pos - s_neg)})
        loss = nce_loss(np.array([2.0, 0.0]))
        assert float(loss.data) == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-12)

    def test_dominant_positive_drives_loss_to_zero(self):
        loss = nce_loss(np.array([100.0, 0.0, 0.0]))
        assert 0.0 <= float(loss.data) < 1e-40

    def test_batch_is_mean_of_rows(self):
        rows = np.array([[2.0, 0.0], [0.0, 2.0]])
        per_row = [float(nce_loss(r).data) for r in rows]
        assert float(nce_loss(rows).data) == pytest.approx(np.mean(per_row), abs=1e-12)

    def test_monotone_in_scores(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            row = rng.standard_normal(5)
            base = float(nce_loss(row).data)
            up = row.copy()
            up[0] += 0.1  # better positive -> lower loss
            assert float(nce_loss(up).data) < base
            worse = row.copy()
            worse[2] += 0.1  # better negative -> higher loss
            assert float(nce_loss(worse).data) > base

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(2)
        row = rng.standard_normal(5)
        p = Parameter(row.copy(), name="scores")
        with Tape():
            backward(nce_loss(p))
        z = np.exp(row - row.max())
        probs = z / z.sum()
        expected = probs.copy()
        expected[0] -= 1.0
        np.testing.assert_allclose(p.grad, expected, atol=1e-12)
        assert p.grad[0] <= 0.0  # the positive's gradient never points up

    def test_validation(self):
        with pytest.raises(ValueError, match="1\\+K"):
            nce_loss(np.array([1.0]))
        with pytest.raises(ValueError, match="1\\+K"):
            nce_loss(np.zeros((2, 2, 2)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def _param(values, name, frozen=False):
    return Parameter(np.asarray(values, dtype=np.float64), name=name, frozen=frozen)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        # with g=1 every bias-corrected moment is 1, so the step is -lr/(1+eps)
        p = _param([0.0], "w")
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(-0.1, abs=1e-6)

    def test_zero_or_missing_gradient_leaves_parameter_alone(self):
        p = _param([1.5], "w")
        opt = Adam([p], lr=0.1)
        p.grad = np.array([0.0])
        opt.step()
        assert p.data[0] == 1.5
        p.grad = None
        opt.step()
        assert p.data[0] == 1.5

    def test_frozen_parameters_excluded(self):
        frozen = _param([1.0], "frozen", frozen=True)
        live = _param([1.0], "live")
        opt = Adam([frozen, live], lr=0.1)
        assert opt.params == [live]
        frozen.grad = np.array([1.0])
        live.grad = np.array([1.0])
        opt.step()
        assert frozen.data[0] == 1.0
        assert live.data[0] != 1.0

    def test_non_finite_gradient_aborts_with_name(self):
        p = _param([0.0], "embed.word")
        opt = Adam([p], lr=0.1)
        p.grad = np.array([float("nan")])
        with pytest.raises(TrainingError, match="embed.word"):
            opt.step()
        p.grad = np.array([float("inf")])
        with pytest.raises(TrainingError, match="non-finite"):
            opt.step()

    def test_clipping_equals_manually_scaled_gradients(self):
        # joint norm of (3, 4) is 5; clip at 2.5 halves both gradients
        a1, b1 = _param([0.0], "a"), _param([0.0], "b")
        clipped = Adam([a1, b1], lr=0.05, grad_clip_norm=2.5)
        a1.grad, b1.grad = np.array([3.0]), np.array([4.0])
        clipped.step()

        a2, b2 = _param([0.0], "a"), _param([0.0], "b")
        plain = Adam([a2, b2], lr=0.05, grad_clip_norm=0.0)
        a2.grad, b2.grad = np.array([1.5]), np.array([2.0])
        plain.step()

        assert a1.data[0] == pytest.approx(a2.data[0], abs=1e-15)
        assert b1.data[0] == pytest.approx(b2.data[0], abs=1e-15)

    def test_clip_above_norm_is_identity(self):
        a1 = _param([0.0], "a")
        loose = Adam([a1], lr=0.05, grad_clip_norm=100.0)
        a1.grad = np.array([3.0])
        loose.step()
        a2 = _param([0.0], "a")
        plain = Adam([a2], lr=0.05, grad_clip_norm=0.0)
        a2.grad = np.array([3.0])
        plain.step()
        assert a1.data[0] == a2.data[0]

    def test_matches_independent_reference_over_steps(self):
        rng = np.random.default_rng(3)
        shapes = [(3,), (2, 2)]
        params = [_param(rng.standard_normal(s), f"p{i}") for i, s in enumerate(shapes)]
        ref = [p.data.copy() for p in params]
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        opt = Adam(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
        m = [np.zeros_like(r) for r in ref]
        v = [np.zeros_like(r) for r in ref]
        for t in range(1, 6):
            grads = [rng.standard_normal(s) for s in shapes]
            for p, g in zip(params, grads):
                p.grad = g.copy()
            opt.step()
            for i, g in enumerate(grads):
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mhat = m[i] / (1 - b1**t)
                vhat = v[i] / (1 - b2**t)
                ref[i] = ref[i] - lr * mhat / (np.sqrt(vhat) + eps)
            for p, r in zip(params, ref):
                np.testing.assert_allclose(p.data, r, atol=1e-12)


# ---------------------------------------------------------------------------
# training loop on a small generated corpus
# ---------------------------------------------------------------------------


SMALL = SyntheticConfig(
    num_topics=4,
    num_news=60,
    num_users=16,
    num_impressions=150,
    candidates_per_impression=6,
    d_img=8,
    max_rois=3,
    seed=11,
)

ENC = EncoderConfig(
    d=16, d_img=8, d_a=8, heads=2, n_text_layers=1, n_co_layers=1,
    m_max=12, k_max=3, ffn_mult=2,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return generate_synthetic(SMALL, tmp_path_factory.mktemp("corpus"))


class TestTrainLoop:
    def test_loss_decreases_and_logs_are_written(self, corpus, tmp_path):
        model = MMRecModel(ENC, vocab_size=len(corpus.vocab), seed=0)
        cfg = TrainConfig(lr=3e-3, epochs=3, batch_size=16, k_neg=3, seed=0)
        result = train(
            model, corpus.news, corpus.splits["train"], cfg,
            dev_impressions=corpus.splits["dev"], out_dir=tmp_path,
            vocab_hash=corpus.vocab.content_hash(),
        )
        assert result.losses[-1] < result.losses[0]
        assert len(result.epochs) == 3
        assert {"epoch", "loss", "step", "dev_auc", "dev_mrr"} <= set(result.epochs[0])
        assert result.best_epoch >= 0
        # log file: one JSON record per epoch, matching the result
        lines = (tmp_path / "training_log.jsonl").read_text().splitlines()
        assert [json.loads(l)["loss"] for l in lines] == result.losses
        assert (tmp_path / "checkpoint-best" / "manifest.json").exists()

    def test_bit_identical_reruns(self, corpus):
        def run():
            model = MMRecModel(ENC, vocab_size=len(corpus.vocab), seed=0)
            cfg = TrainConfig(lr=3e-3, epochs=2, batch_size=16, k_neg=3, seed=0)
            result = train(model, corpus.news, corpus.splits["train"], cfg)
            return result.losses, {p.name: p.data.copy() for p in model.parameters()}

        losses_a, params_a = run()
        losses_b, params_b = run()
        assert losses_a == losses_b  # exact float equality, not approx
        for name in params_a:
            assert np.array_equal(params_a[name], params_b[name]), name

    def test_different_data_seed_changes_trajectory(self, corpus):
        def run(seed):
            model = MMRecModel(ENC, vocab_size=len(corpus.vocab), seed=0)
            cfg = TrainConfig(lr=3e-3, epochs=1, batch_size=16, k_neg=3, seed=seed)
            return train(model, corpus.news, corpus.splits["train"], cfg).losses

        assert run(0) != run(1)

    def test_no_usable_samples_raises(self, corpus):
        model = MMRecModel(ENC, vocab_size=len(corpus.vocab), seed=0)
        bad = [_impression("i", [("x", 0), ("y", 0)])]  # no positives at all
        with pytest.raises(TrainingError, match="no usable training samples"):
            train(model, corpus.news, bad, TrainConfig(epochs=1))

    def test_no_dev_set_still_saves_final_checkpoint(self, corpus, tmp_path):
        model = MMRecModel(ENC, vocab_size=len(corpus.vocab), seed=0)
        cfg = TrainConfig(lr=3e-3, epochs=1, batch_size=16, k_neg=3, seed=0)
        result = train(model, corpus.news, corpus.splits["train"], cfg, out_dir=tmp_path)
        assert math.isnan(result.best_dev_auc)
        manifest = json.loads((tmp_path / "checkpoint-best" / "manifest.json").read_text())
        assert manifest["step"] == result.epochs[-1]["step"]

    def test_config_validation(self):
        with pytest.raises(ValueError, match="lr"):
            TrainConfig(lr=0.0).validate()
        with pytest.raises(ValueError, match="k_neg"):
            TrainConfig(k_neg=0).validate()
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0).validate()
        with pytest.raises(ValueError, match="grad_clip_norm"):
            TrainConfig(grad_clip_norm=-1.0).validate()

    def test_single_step_reduces_loss_on_its_own_batch(self, corpus):
        model = MMRecModel(ENC, vocab_size=len(corpus.vocab), seed=0)
        build = build_samples(corpus.splits["train"], k_neg=3, seed=0)
        chunk = build.samples[:16]
        opt = Adam([p for p in model.parameters()], lr=1e-2)
        first = train_step(model, corpus.news, chunk, opt, history_max=50)
        for _ in range(4):
            last = train_step(model, corpus.news, chunk, opt, history_max=50)
        assert last < first


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class TestCheckpoints:
    @pytest.fixture()
    def trained(self, corpus, tmp_path):
        model = MMRecModel(ENC, vocab_size=len(corpus.vocab), seed=3)
        model.randomize_params(3)
        path = save_checkpoint(
            model, tmp_path / "ckpt", vocab_hash="vh", step=7, metrics={"dev_auc": 0.5}
        )
        return model, path

    def test_round_trip_parameters_and_scores(self, trained, corpus):
        model, path = trained
        loaded, manifest = load_checkpoint(path, expected_vocab_hash="vh")
        for p, q in zip(model.parameters(), loaded.parameters()):
            assert p.name == q.name
            np.testing.assert_allclose(q.data, p.data, atol=1e-6)
        assert manifest["step"] == 7
        assert manifest["metrics"] == {"dev_auc": 0.5}
        assert loaded.describe() == model.describe()
        # scores reproduce through the numpy path
        rng = np.random.default_rng(0)
        hist_t, hist_p = rng.standard_normal((2, 5, 16))
        cand_t, cand_p = rng.standard_normal((2, 4, 16))
        before = model.score_impression_np(hist_t, hist_p, cand_t, cand_p)
        after = loaded.score_impression_np(hist_t, hist_p, cand_t, cand_p)
        np.testing.assert_allclose(after, before, atol=1e-6)

    def test_manifest_lists_every_parameter_in_order(self, trained):
        model, path = trained
        manifest = json.loads((path / "manifest.json").read_text())
        assert manifest["format"] == "mmrec-checkpoint"
        assert manifest["version"] == 1
        names = [e["name"] for e in manifest["params"]]
        assert names == [p.name for p in model.parameters()]
        # offsets tile the blob without gaps
        offset = 0
        for e in manifest["params"]:
            assert e["offset"] == offset
            offset += e["size"]

    def _edit_manifest(self, path, mutate):
        manifest = json.loads((path / "manifest.json").read_text())
        mutate(manifest)
        (path / "manifest.json").write_text(json.dumps(manifest))

    def test_missing_parameter_is_named(self, trained):
        _, path = trained
        self._edit_manifest(path, lambda m: m["params"].pop(0))
        with pytest.raises(CheckpointError, match="missing parameter 'embed.word'"):
            load_checkpoint(path)

    def test_unknown_parameter_is_named(self, trained):
        _, path = trained
        self._edit_manifest(
            path,
            lambda m: m["params"].append(
                {"name": "bogus.w", "shape": [1], "offset": 0, "size": 1}
            ),
        )
        with pytest.raises(CheckpointError, match="unknown parameter 'bogus.w'"):
            load_checkpoint(path)

    def test_shape_mismatch_is_named(self, trained):
        _, path = trained
        def mutate(m):
            m["params"][0]["shape"] = [1, 1]
        self._edit_manifest(path, mutate)
        with pytest.raises(CheckpointError, match="shape mismatch for parameter 'embed.word'"):
            load_checkpoint(path)

    def test_vocab_hash_mismatch(self, trained):
        _, path = trained
        with pytest.raises(CheckpointError, match="vocabulary hash mismatch"):
            load_checkpoint(path, expected_vocab_hash="other")
        # not checked when the caller does not supply a hash
        load_checkpoint(path)

    def test_truncated_blob_is_detected(self, trained):
        _, path = trained
        def mutate(m):
            m["params"][-1]["offset"] += 10_000_000
        self._edit_manifest(path, mutate)
        with pytest.raises(CheckpointError, match="blob too short"):
            load_checkpoint(path)

    def test_manifest_errors(self, trained, tmp_path):
        _, path = trained
        with pytest.raises(CheckpointError, match="no manifest.json"):
            load_checkpoint(tmp_path / "nowhere")
        (path / "manifest.json").write_text("{not json")
        with pytest.raises(CheckpointError, match="unreadable manifest"):
            load_checkpoint(path)
        (path / "manifest.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(CheckpointError, match="not a checkpoint manifest"):
            load_checkpoint(path)


# ---------------------------------------------------------------------------
# end-to-end gradient check through the loss
# ---------------------------------------------------------------------------


class TestEndToEndGradients:
    def test_full_model_gradients_through_loss(self, corpus):
        tiny = EncoderConfig(
            d=6, d_img=8, d_a=4, heads=2, n_text_layers=1, n_co_layers=1,
            m_max=6, k_max=3, ffn_mult=2,
        )
        build = build_samples(corpus.splits["train"], k_neg=2, seed=1)
        chunk = build.samples[:3]

        def builder(seed):
            model = MMRecModel(tiny, vocab_size=len(corpus.vocab), seed=seed)
            model.randomize_params(seed)
            from mmrec.training import _assemble_batch

            batch, hist_idx, hist_mask, cand_idx = _assemble_batch(
                model, corpus.news, chunk, history_max=4
            )

            def loss_fn():
                r_t, r_p = model.encode_batch(batch)
                hist_t = ad.embedding_lookup(r_t, hist_idx)
                hist_p = ad.embedding_lookup(r_p, hist_idx)
                cand_t = ad.embedding_lookup(r_t, cand_idx)
                cand_p = ad.embedding_lookup(r_p, cand_idx)
                return nce_loss(
                    model.score_batch(hist_t, hist_p, hist_mask, cand_t, cand_p)
                )

            return loss_fn, model.parameters()

        report = grad_check(builder, seed=9, step=1e-5, tol=1e-4)
        assert report.passed, report.summary()
