"""Ablation-driver tests: shared data/seeds across variants, self-comparison
sanity, report structure, and determinism."""

import json

import pytest

from mmrec.ablation import ablate
from mmrec.config import ExperimentConfig
from mmrec.metrics import METRIC_NAMES
from mmrec.synthetic import SyntheticConfig, generate_synthetic

CFG = ExperimentConfig(
    num_topics=4, num_news=60, num_users=16, num_impressions=150,
    candidates_per_impression=6, max_rois=3, data_seed=11,
    d=16, d_img=8, d_a=8, heads=2, n_text_layers=1, n_co_layers=1,
    m_max=12, k_max=3, ffn_mult=2,
    lr=3e-3, epochs=1, batch_size=16, k_neg=3,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return generate_synthetic(CFG.synthetic_config(), tmp_path_factory.mktemp("abl"))


def _run(corpus, variants, seeds, out_dir=None):
    return ablate(CFG, variants, seeds, corpus.news, corpus.splits, corpus.vocab, out_dir=out_dir)


class TestAblate:
    def test_self_comparison_has_zero_deltas(self, corpus):
        report = _run(corpus, ["full", "full"], seeds=[0, 1])
        assert report.labels == ["full", "full#2"]
        assert report.variants == {"full": "full", "full#2": "full"}
        deltas = report.deltas["full - full#2"]
        assert all(deltas[name] == 0.0 for name in METRIC_NAMES)

    def test_report_records_all_seeds_per_variant(self, corpus):
        report = _run(corpus, ["full", "text-only"], seeds=[0, 1, 2])
        for label in report.labels:
            assert report.reports[label].run_seeds == [0, 1, 2]
            assert len(report.reports[label].per_run) == 3
        assert report.seeds == [0, 1, 2]

    def test_deltas_cover_every_pair(self, corpus):
        report = _run(corpus, ["full", "text-only", "no-coattn"], seeds=[0])
        assert set(report.deltas) == {
            "full - text-only",
            "full - no-coattn",
            "text-only - no-coattn",
        }
        for name in METRIC_NAMES:
            a = report.reports["full"].mean[name]
            b = report.reports["text-only"].mean[name]
            assert report.deltas["full - text-only"][name] == pytest.approx(a - b)

    def test_markdown_and_json_outputs(self, corpus):
        report = _run(corpus, ["full", "text-only"], seeds=[0, 1])
        md = report.to_markdown()
        assert "| model | AUC | MRR | NDCG@5 | NDCG@10 |" in md
        assert "| full |" in md and "| text-only |" in md
        assert "Seeds: 0, 1" in md
        assert "| full - text-only |" in md
        loaded = json.loads(report.to_json())
        assert loaded["labels"] == ["full", "text-only"]
        assert loaded["reports"]["full"]["run_seeds"] == [0, 1]
        assert "full - text-only" in loaded["deltas"]

    def test_deterministic_across_invocations(self, corpus):
        a = _run(corpus, ["full", "vanilla-attn"], seeds=[0]).to_dict()
        b = _run(corpus, ["full", "vanilla-attn"], seeds=[0]).to_dict()
        a.pop("elapsed_s")
        b.pop("elapsed_s")
        assert a == b

    def test_per_run_artifacts_written_when_requested(self, corpus, tmp_path):
        _run(corpus, ["full", "text-only"], seeds=[0], out_dir=tmp_path)
        for label in ("full", "text-only"):
            run = tmp_path / label / "seed0"
            assert (run / "training_log.jsonl").exists()
            assert (run / "checkpoint-best" / "manifest.json").exists()

    def test_validation(self, corpus):
        with pytest.raises(ValueError, match="at least 2 variants"):
            _run(corpus, ["full"], seeds=[0])
        with pytest.raises(ValueError, match="at least one seed"):
            _run(corpus, ["full", "text-only"], seeds=[])
        with pytest.raises(ValueError, match="'train' and 'dev'"):
            ablate(CFG, ["full", "text-only"], [0], corpus.news,
                   {"train": corpus.splits["train"]}, corpus.vocab)
