"""Pipeline: config parsing, seeding, checkpoints, training orchestration."""

import json
import math
import warnings

import pytest
import torch

warnings.filterwarnings("ignore", message="batch of .* is small")

from fewshot_dlg.corpus import Corpus, CorpusFormat, load_corpus, save_corpus
from fewshot_dlg.errors import BadCheckpoint, ConfigError, DataError, MissingStage1
from fewshot_dlg.generator import (
    ConditioningMode,
    ExternalEncoderKind,
    GeneratorConfig,
    generate_response,
)
from fewshot_dlg.latent import LaedModel, LatentConfig, LatentModel, LatentVariant
from fewshot_dlg.metrics import aggregate_runs
from fewshot_dlg.pipeline import (
    ExperimentConfig,
    ModelVariant,
    Stage1Checkpoints,
    derive_seed,
    evaluate_model,
    load_generator_checkpoint,
    load_latent_checkpoint,
    parse_config_text,
    run_experiment,
    save_generator_checkpoint,
    save_latent_checkpoint,
    train_stage1,
    train_stage2,
)
from fewshot_dlg.synthetic import build_task_corpus, build_transfer_corpus
from fewshot_dlg.corpus import SPECIALS, Vocab, build_vocab, corpus_instances


def tiny_latent():
    return LatentConfig(
        M=2, K=3, embedding_size=8, hidden_size=12, context_hidden_size=12,
        latent_dim=4, anneal_steps=20, word_dropout=0.1,
    )


def tiny_generator(**kw):
    defaults = dict(utterance_hidden=12, dialogue_hidden=16, embedding_size=10, max_decode_len=6)
    defaults.update(kw)
    return GeneratorConfig(**defaults)


def tiny_experiment(tmp_path, variant=ModelVariant.HRED, **kw):
    task = build_task_corpus(12, seed=7)
    transfer = build_transfer_corpus(4, seed=11)
    save_corpus(task, tmp_path / "task.json")
    save_corpus(transfer, tmp_path / "transfer.json")
    defaults = dict(
        transfer_corpus=str(tmp_path / "transfer.json"),
        main_corpus=str(tmp_path / "task.json"),
        target_domain="navigate",
        ratios=(0.1,),
        runs=1,
        base_seed=3,
        variant=variant,
        batch_size=8,
        exclusions=("STORE_DETAILS",),
        stage1_steps=12,
        stage2_max_steps=12,
        stage2_eval_every=6,
        latent=tiny_latent(),
        generator=tiny_generator(
            conditioning=(
                ConditioningMode.CODE_CONCAT
                if variant in (ModelVariant.HRED_LAED, ModelVariant.DIKTNET)
                else ConditioningMode.VAE_CONCAT
                if variant is ModelVariant.HRED_VAE
                else ConditioningMode.NONE
            ),
            external_encoder=(
                ExternalEncoderKind.STUB
                if variant is ModelVariant.DIKTNET
                else ExternalEncoderKind.NONE
            ),
        ),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestConfigParsing:
    def test_round_trip_keys(self):
        text = """
# comment line
transfer_corpus=/data/t.json
main_corpus=/data/m.json
target_domain=weather
ratios=0.01,0.05
runs=3
base_seed=42
variant=HRED_LAED
batch_size=4
optimizer.name=adam
optimizer.lr=0.002
laed.joint=false
stage1.steps=7
stage2.max_steps=9
stage2.eval_every=2
stage2.patience=5
latent.M=4
latent.K=6
latent.word_dropout=0.1
generator.utterance_hidden=32
generator.dialogue_hidden=48
generator.max_decode_len=11
"""
        cfg = parse_config_text(text)
        assert cfg.target_domain == "weather"
        assert cfg.ratios == (0.01, 0.05)
        assert cfg.runs == 3
        assert cfg.variant is ModelVariant.HRED_LAED
        assert cfg.learning_rate == 0.002
        assert cfg.laed_joint is False
        assert cfg.latent.M == 4 and cfg.latent.K == 6
        assert cfg.generator.dialogue_hidden == 48
        assert cfg.generator.max_decode_len == 11
        # variant implies decoder-code conditioning unless overridden
        assert cfg.generator.conditioning is ConditioningMode.CODE_CONCAT

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("nonsense_key=1\n")
        with pytest.raises(ConfigError):
            parse_config_text("latent.bogus=1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("runs=three\n")
        with pytest.raises(ConfigError):
            parse_config_text("ratios=0.0\n")
        with pytest.raises(ConfigError):
            parse_config_text("optimizer.name=sgd\n")

    def test_explicit_conditioning_wins_over_variant(self):
        cfg = parse_config_text("variant=HRED_LAED\ngenerator.conditioning=encoder_concat\n")
        assert cfg.generator.conditioning is ConditioningMode.ENCODER_CONCAT

    def test_diktnet_defaults_to_stub_encoder(self):
        cfg = parse_config_text("variant=DIKTNET\n")
        assert cfg.generator.external_encoder is ExternalEncoderKind.STUB


class TestDeriveSeed:
    def test_concerns_are_independent_streams(self):
        seeds = {derive_seed(1, c, 0) for c in ("sampling", "init", "shuffle", "noise")}
        assert len(seeds) == 4

    def test_stable(self):
        assert derive_seed(1234, "sampling", 3) == derive_seed(1234, "sampling", 3)
        assert derive_seed(1234, "sampling", 3) != derive_seed(1234, "sampling", 4)
        assert all(0 <= derive_seed(s, "x", r) < 2**63 for s in (0, 9) for r in (0, 7))


class TestLatentCheckpoints:
    def _vocab(self):
        return Vocab(SPECIALS + ("a", "b", "c"))

    @pytest.mark.parametrize("variant", [LatentVariant.DI_VAE, LatentVariant.DI_VST,
                                         LatentVariant.VAE])
    def test_latent_round_trip(self, tmp_path, variant):
        torch.manual_seed(0)
        model = LatentModel(self._vocab(), tiny_latent(), variant)
        save_latent_checkpoint(model, tmp_path / "m", {"excluded": "X,Y"})
        again = load_latent_checkpoint(tmp_path / "m")
        assert type(again) is LatentModel and again.variant is variant
        for k, v in model.state_dict().items():
            assert torch.equal(v, again.state_dict()[k])

    def test_laed_round_trip(self, tmp_path):
        torch.manual_seed(0)
        model = LaedModel(self._vocab(), tiny_latent())
        save_latent_checkpoint(model, tmp_path / "laed")
        again = load_latent_checkpoint(tmp_path / "laed")
        assert isinstance(again, LaedModel)
        for k, v in model.state_dict().items():
            assert torch.equal(v, again.state_dict()[k])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(BadCheckpoint):
            load_latent_checkpoint(tmp_path / "nope")


class TestGeneratorCheckpoint:
    def test_greedy_outputs_identical_after_reload(self, tmp_path):
        torch.manual_seed(1)
        corpus = build_task_corpus(6, seed=7)
        vocab = build_vocab(corpus, 1)
        model = GeneratorModel_for_test(vocab)
        probe = corpus_instances(corpus)[:5]
        before = [generate_response(i, model) for i in probe]
        save_generator_checkpoint(model, tmp_path / "gen")
        again = load_generator_checkpoint(tmp_path / "gen")
        after = [generate_response(i, again) for i in probe]
        assert before == after

    def test_wrong_stage_rejected(self, tmp_path):
        torch.manual_seed(0)
        model = LatentModel(Vocab(SPECIALS + ("a",)), tiny_latent(), LatentVariant.DI_VAE)
        save_latent_checkpoint(model, tmp_path / "m")
        with pytest.raises(BadCheckpoint):
            load_generator_checkpoint(tmp_path / "m")


def GeneratorModel_for_test(vocab):
    from fewshot_dlg.generator import GeneratorModel

    return GeneratorModel(vocab, tiny_generator())


class TestTrainStage1:
    def test_checkpoints_exist_and_reload(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED_LAED)
        transfer = load_corpus(cfg.transfer_corpus, CorpusFormat.NORMALIZED_JSON)
        kept = transfer.without_domains({"STORE_DETAILS"})
        paths = train_stage1(cfg, kept, tmp_path / "s1", excluded=("STORE_DETAILS",))
        assert paths.divae is not None and paths.laed is not None
        divae = load_latent_checkpoint(paths.divae)
        laed = load_latent_checkpoint(paths.laed)
        assert divae.variant is LatentVariant.DI_VAE
        assert isinstance(laed, LaedModel)
        manifest = (paths.divae / "manifest.txt").read_text()
        assert "excluded=STORE_DETAILS" in manifest
        assert (paths.divae / "code_inventory.txt").exists()

    def test_vae_variant_trains_vae_only(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED_VAE)
        transfer = load_corpus(cfg.transfer_corpus, CorpusFormat.NORMALIZED_JSON)
        paths = train_stage1(cfg, transfer, tmp_path / "s1")
        assert paths.vae is not None and paths.divae is None and paths.laed is None

    def test_hred_variant_trains_nothing(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED)
        transfer = load_corpus(cfg.transfer_corpus, CorpusFormat.NORMALIZED_JSON)
        paths = train_stage1(cfg, transfer, tmp_path / "s1")
        assert paths.divae is None and paths.laed is None and paths.vae is None

    def test_empty_corpus_rejected(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED_LAED)
        with pytest.raises(DataError):
            train_stage1(cfg, Corpus("empty", ()), tmp_path / "s1")

    def test_heldout_loss_decreases_with_real_training(self, tmp_path):
        cfg = tiny_experiment(
            tmp_path, variant=ModelVariant.HRED_LAED, stage1_steps=150, batch_size=24
        )
        transfer = build_transfer_corpus(10, seed=11)
        paths = train_stage1(cfg, transfer, tmp_path / "s1")
        for path in (paths.divae, paths.laed):
            manifest = dict(
                line.split("=", 1) for line in (path / "manifest.txt").read_text().splitlines()
            )
            assert float(manifest["heldout_loss_end"]) < float(manifest["heldout_loss_start"])


class TestTrainStage2:
    def _corpora(self, tmp_path, cfg):
        main = load_corpus(cfg.main_corpus, CorpusFormat.NORMALIZED_JSON)
        source = main.without_domains({cfg.target_domain})
        target = main.restrict(cfg.target_domain)
        seed_corpus = Corpus("seed", target.dialogues[:2])
        return source, seed_corpus

    def test_hred_without_stage1(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED)
        source, seed_corpus = self._corpora(tmp_path, cfg)
        path = train_stage2(cfg, source, seed_corpus, None, tmp_path / "gen")
        model = load_generator_checkpoint(path)
        assert model.config.conditioning is ConditioningMode.NONE

    def test_diktnet_without_stage1_raises(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.DIKTNET)
        source, seed_corpus = self._corpora(tmp_path, cfg)
        with pytest.raises(MissingStage1):
            train_stage2(cfg, source, seed_corpus, None, tmp_path / "gen")

    def test_stage1_weights_frozen_through_training(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED_LAED, stage2_max_steps=20)
        transfer = load_corpus(cfg.transfer_corpus, CorpusFormat.NORMALIZED_JSON)
        stage1 = train_stage1(cfg, transfer, tmp_path / "s1", excluded=())
        divae_before = load_latent_checkpoint(stage1.divae).state_dict()
        laed_before = load_latent_checkpoint(stage1.laed).state_dict()
        source, seed_corpus = self._corpora(tmp_path, cfg)
        gen_path = train_stage2(cfg, source, seed_corpus, stage1, tmp_path / "gen")
        model = load_generator_checkpoint(gen_path)
        after = model.state_dict()
        delta = 0.0
        for key, value in divae_before.items():
            delta += float((after[f"_stage1_modules.divae.{key}"] - value).norm() ** 2)
        for key, value in laed_before.items():
            delta += float((after[f"_stage1_modules.laed.{key}"] - value).norm() ** 2)
        assert math.sqrt(delta) == 0.0

    def test_evaluate_model_scores(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED)
        source, seed_corpus = self._corpora(tmp_path, cfg)
        path = train_stage2(cfg, source, seed_corpus, None, tmp_path / "gen")
        model = load_generator_checkpoint(path)
        main = load_corpus(cfg.main_corpus, CorpusFormat.NORMALIZED_JSON)
        scores = evaluate_model(model, main, "navigate")
        assert set(scores) == {"bleu", "entity_p", "entity_r", "entity_f1", "n_pairs"}
        assert scores["n_pairs"] == 12 * 3
        assert 0.0 <= scores["entity_f1"] <= 100.0


class TestRunExperiment:
    def test_single_run_reports_zero_std(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED, runs=1)
        report = run_experiment(cfg, tmp_path / "exp")
        cell = report.cells[("HRED@10%", "navigate", "bleu")]
        assert cell.std == 0.0
        table = (tmp_path / "exp" / "report.txt").read_text()
        assert "HRED@10%" in table
        assert "±" in table

    def test_identical_config_byte_identical_report(self, tmp_path):
        cfg1 = tiny_experiment(tmp_path, variant=ModelVariant.HRED, runs=2)
        run_experiment(cfg1, tmp_path / "exp1")
        cfg2 = tiny_experiment(tmp_path, variant=ModelVariant.HRED, runs=2)
        run_experiment(cfg2, tmp_path / "exp2")
        assert (tmp_path / "exp1" / "report.txt").read_bytes() == (
            tmp_path / "exp2" / "report.txt"
        ).read_bytes()

    def test_runs_sample_different_seed_dialogues(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED, runs=3, ratios=(0.2,))
        run_experiment(cfg, tmp_path / "exp")
        runs = json.loads((tmp_path / "exp" / "runs.json").read_text())
        assert len(runs) == 3
        seeds = {r["seed"] for r in runs}
        assert seeds == {3, 4, 5}

    def test_aggregation_matches_brute_force(self, tmp_path):
        cfg = tiny_experiment(tmp_path, variant=ModelVariant.HRED, runs=3)
        report = run_experiment(cfg, tmp_path / "exp")
        runs = json.loads((tmp_path / "exp" / "runs.json").read_text())
        f1s = [r["entity_f1"] for r in runs]
        mean, std = aggregate_runs(f1s)
        cell = report.cells[("HRED@10%", "navigate", "entity_f1")]
        assert cell.mean == pytest.approx(mean, abs=1e-9)
        assert cell.std == pytest.approx(std, abs=1e-9)

    def test_missing_target_domain(self, tmp_path):
        cfg = tiny_experiment(tmp_path, target_domain="bogus")
        with pytest.raises(DataError):
            run_experiment(cfg, tmp_path / "exp")
