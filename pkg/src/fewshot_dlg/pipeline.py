"""Two-stage training orchestration: seeding, checkpoints, and the run grid.

Seeds for distinct concerns (sampling, initialization, shuffling, noise)
are derived from (base seed + run index, concern name) through a stable
hash, so adding a concern never perturbs the streams of the others.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .corpus import (
    Corpus,
    CorpusFormat,
    FewShotSpec,
    Vocab,
    build_vocab,
    corpus_instances,
    exclude_overlap,
    load_corpus,
    sample_few_shot,
    tokenize,
)
from .errors import BadCheckpoint, ConfigError, DataError, MissingStage1, VocabMismatch
from .generator import (
    ConditioningMode,
    ExternalEncoderKind,
    GeneratorConfig,
    GeneratorModel,
    Stage1Bundle,
    generate_response,
    hred_step_loss,
)
from .latent import (
    LaedModel,
    LatentConfig,
    LatentModel,
    LatentVariant,
    cluster_by_code,
    corpus_laed_pairs,
    corpus_utterances,
    corpus_vst_triples,
    di_vae_loss,
    di_vst_loss,
    laed_loss,
    vae_loss,
)
from .metrics import EvalPair, EvalReport, corpus_bleu, entity_f1

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
DEFAULT_SEED = 1234


class ModelVariant(enum.Enum):
    HRED = "HRED"
    HRED_VAE = "HRED_VAE"
    HRED_LAED = "HRED_LAED"
    DIKTNET = "DIKTNET"


VARIANT_CONDITIONING = {
    ModelVariant.HRED: ConditioningMode.NONE,
    ModelVariant.HRED_VAE: ConditioningMode.VAE_CONCAT,
    ModelVariant.HRED_LAED: ConditioningMode.CODE_CONCAT,
    ModelVariant.DIKTNET: ConditioningMode.CODE_CONCAT,
}


def derive_seed(base: int, concern: str, run: int = 0) -> int:
    """Stable 63-bit stream seed for one concern of one run."""
    digest = hashlib.blake2b(f"{base}:{run}:{concern}".encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "big") & (2**63 - 1)


@dataclass
class ExperimentConfig:
    transfer_corpus: str = ""
    main_corpus: str = ""
    eval_corpus: str = ""
    transfer_format: CorpusFormat = CorpusFormat.NORMALIZED_JSON
    main_format: CorpusFormat = CorpusFormat.NORMALIZED_JSON
    target_domain: str = ""
    ratios: tuple[float, ...] = (0.01, 0.03, 0.05, 0.10)
    runs: int = 10
    base_seed: int = DEFAULT_SEED
    variant: ModelVariant = ModelVariant.HRED
    batch_size: int = 16
    min_freq: int = 1
    stage1_min_freq: int = 2
    exclusions: tuple[str, ...] | None = None
    optimizer_name: str = "adam"
    learning_rate: float = 0.001
    laed_joint: bool = True
    stage1_steps: int = 600
    stage2_max_steps: int = 600
    stage2_eval_every: int = 50
    stage2_patience: int = 3
    latent: LatentConfig = field(default_factory=LatentConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        for r in self.ratios:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"ratio {r} outside (0, 1]")
        if self.optimizer_name != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer_name!r}")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_ratios(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in raw.split(",") if p.strip())


_TOP_KEYS = {
    "transfer_corpus": str,
    "main_corpus": str,
    "eval_corpus": str,
    "target_domain": str,
    "runs": int,
    "base_seed": int,
    "batch_size": int,
    "min_freq": int,
    "stage1_min_freq": int,
}

_LATENT_KEYS = {
    "M": int,
    "K": int,
    "temperature": float,
    "temperature_end": float,
    "anneal_steps": int,
    "hard": _parse_bool,
    "embedding_size": int,
    "hidden_size": int,
    "context_hidden_size": int,
    "latent_dim": int,
    "word_dropout": float,
}

_GENERATOR_KEYS = {
    "utterance_hidden": int,
    "dialogue_hidden": int,
    "decoder_hidden": int,
    "embedding_size": int,
    "external_dim": int,
    "external_sidecar": str,
    "max_decode_len": int,
}


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the plain-text key=value config format; unknown keys are errors."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        values[key.strip()] = raw.strip()

    cfg = ExperimentConfig()
    latent_kwargs: dict = {}
    generator_kwargs: dict = {}
    explicit_conditioning = False
    explicit_external = False

    for key, raw in values.items():
        try:
            if key in _TOP_KEYS:
                setattr(cfg, key, _TOP_KEYS[key](raw))
            elif key == "ratios":
                cfg.ratios = _parse_ratios(raw)
            elif key == "variant":
                cfg.variant = ModelVariant(raw)
            elif key == "exclusions":
                cfg.exclusions = tuple(d for d in raw.split(",") if d.strip())
            elif key in ("transfer_format", "main_format"):
                setattr(cfg, key, CorpusFormat(raw))
            elif key == "optimizer.name":
                cfg.optimizer_name = raw
            elif key == "optimizer.lr":
                cfg.learning_rate = float(raw)
            elif key == "laed.joint":
                cfg.laed_joint = _parse_bool(raw)
            elif key == "stage1.steps":
                cfg.stage1_steps = int(raw)
            elif key == "stage2.max_steps":
                cfg.stage2_max_steps = int(raw)
            elif key == "stage2.eval_every":
                cfg.stage2_eval_every = int(raw)
            elif key == "stage2.patience":
                cfg.stage2_patience = int(raw)
            elif key.startswith("latent."):
                sub = key[len("latent."):]
                if sub not in _LATENT_KEYS:
                    raise ConfigError(f"unknown config key {key!r}")
                latent_kwargs[sub] = _LATENT_KEYS[sub](raw)
            elif key == "generator.conditioning":
                generator_kwargs["conditioning"] = ConditioningMode(raw)
                explicit_conditioning = True
            elif key == "generator.external_encoder":
                generator_kwargs["external_encoder"] = ExternalEncoderKind(raw)
                explicit_external = True
            elif key.startswith("generator."):
                sub = key[len("generator."):]
                if sub not in _GENERATOR_KEYS:
                    raise ConfigError(f"unknown config key {key!r}")
                generator_kwargs[sub] = _GENERATOR_KEYS[sub](raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc

    try:
        cfg.latent = LatentConfig(**latent_kwargs)
        cfg.generator = GeneratorConfig(**generator_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not explicit_conditioning:
        cfg.generator.conditioning = VARIANT_CONDITIONING[cfg.variant]
    if not explicit_external and cfg.variant is ModelVariant.DIKTNET:
        cfg.generator.external_encoder = ExternalEncoderKind.STUB
    cfg.__post_init__()
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# -- checkpoints -------------------------------------------------------------


def _write_manifest(path: Path, mapping: dict) -> None:
    lines = [f"{k}={mapping[k]}" for k in sorted(mapping)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_manifest(path: Path) -> dict[str, str]:
    if not path.exists():
        raise BadCheckpoint(f"missing manifest: {path}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


def _latent_manifest(cfg: LatentConfig) -> dict:
    return {
        "latent.M": cfg.M,
        "latent.K": cfg.K,
        "latent.temperature": cfg.temperature,
        "latent.temperature_end": cfg.temperature_end,
        "latent.anneal_steps": cfg.anneal_steps,
        "latent.hard": cfg.hard,
        "latent.embedding_size": cfg.embedding_size,
        "latent.hidden_size": cfg.hidden_size,
        "latent.context_hidden_size": cfg.context_hidden_size,
        "latent.latent_dim": cfg.latent_dim,
        "latent.word_dropout": cfg.word_dropout,
    }


def _latent_config_from_manifest(m: dict[str, str]) -> LatentConfig:
    return LatentConfig(
        M=int(m["latent.M"]),
        K=int(m["latent.K"]),
        temperature=float(m["latent.temperature"]),
        temperature_end=float(m["latent.temperature_end"]),
        anneal_steps=int(m["latent.anneal_steps"]),
        hard=m["latent.hard"] == "True",
        embedding_size=int(m["latent.embedding_size"]),
        hidden_size=int(m["latent.hidden_size"]),
        context_hidden_size=int(m["latent.context_hidden_size"]),
        latent_dim=int(m["latent.latent_dim"]),
        word_dropout=float(m["latent.word_dropout"]),
    )


_STAGE_BUILDERS = {
    "divae": lambda vocab, cfg: LatentModel(vocab, cfg, LatentVariant.DI_VAE),
    "divst": lambda vocab, cfg: LatentModel(vocab, cfg, LatentVariant.DI_VST),
    "vae": lambda vocab, cfg: LatentModel(vocab, cfg, LatentVariant.VAE),
    "laed": lambda vocab, cfg: LaedModel(vocab, cfg),
}


def save_latent_checkpoint(model, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(model, LaedModel):
        stage = "laed"
    else:
        stage = {
            LatentVariant.DI_VAE: "divae",
            LatentVariant.DI_VST: "divst",
            LatentVariant.VAE: "vae",
        }[model.variant]
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "vocab_hash": model.vocab.content_hash(),
    }
    manifest.update(_latent_manifest(model.config))
    if extra:
        manifest.update(extra)
    model.vocab.save(directory / "vocab.json")
    torch.save(model.state_dict(), directory / "weights.pt")
    _write_manifest(directory / "manifest.txt", manifest)
    return directory


def load_latent_checkpoint(directory):
    directory = Path(directory)
    manifest = _read_manifest(directory / "manifest.txt")
    stage = manifest.get("stage")
    if stage not in _STAGE_BUILDERS:
        raise BadCheckpoint(f"{directory}: unknown stage {stage!r}")
    vocab = Vocab.load(directory / "vocab.json")
    if vocab.content_hash() != manifest.get("vocab_hash"):
        raise VocabMismatch(f"{directory}: vocab file does not match manifest hash")
    model = _STAGE_BUILDERS[stage](vocab, _latent_config_from_manifest(manifest))
    state = torch.load(directory / "weights.pt", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model


def save_generator_checkpoint(model: GeneratorModel, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": "generator",
        "vocab_hash": model.vocab.content_hash(),
        "generator.utterance_hidden": cfg.utterance_hidden,
        "generator.dialogue_hidden": cfg.dialogue_hidden,
        "generator.decoder_hidden": cfg.decoder_hidden,
        "generator.embedding_size": cfg.embedding_size,
        "generator.conditioning": cfg.conditioning.value,
        "generator.external_encoder": cfg.external_encoder.value,
        "generator.external_dim": cfg.external_dim,
        "generator.external_sidecar": cfg.external_sidecar or "",
        "generator.max_decode_len": cfg.max_decode_len,
        "stage1_components": ",".join(sorted(model.stage1.modules())),
    }
    stage1_modules = model.stage1.modules()
    if stage1_modules:
        any_model = next(iter(stage1_modules.values()))
        manifest.update(_latent_manifest(any_model.config))
        manifest["stage1_vocab_hash"] = any_model.vocab.content_hash()
        any_model.vocab.save(directory / "stage1_vocab.json")
    if extra:
        manifest.update(extra)
    model.vocab.save(directory / "vocab.json")
    torch.save(model.state_dict(), directory / "weights.pt")
    _write_manifest(directory / "manifest.txt", manifest)
    return directory


def load_generator_checkpoint(directory) -> GeneratorModel:
    directory = Path(directory)
    manifest = _read_manifest(directory / "manifest.txt")
    if manifest.get("stage") != "generator":
        raise BadCheckpoint(f"{directory}: not a generator checkpoint")
    vocab = Vocab.load(directory / "vocab.json")
    if vocab.content_hash() != manifest.get("vocab_hash"):
        raise VocabMismatch(f"{directory}: vocab file does not match manifest hash")
    components = [c for c in manifest.get("stage1_components", "").split(",") if c]
    bundle = Stage1Bundle()
    if components:
        stage1_vocab = Vocab.load(directory / "stage1_vocab.json")
        if stage1_vocab.content_hash() != manifest.get("stage1_vocab_hash"):
            raise VocabMismatch(f"{directory}: stage-1 vocab does not match manifest hash")
        latent_cfg = _latent_config_from_manifest(manifest)
        for name in components:
            setattr(bundle, name, _STAGE_BUILDERS[name](stage1_vocab, latent_cfg))
    gen_cfg = GeneratorConfig(
        utterance_hidden=int(manifest["generator.utterance_hidden"]),
        dialogue_hidden=int(manifest["generator.dialogue_hidden"]),
        decoder_hidden=int(manifest["generator.decoder_hidden"]),
        embedding_size=int(manifest["generator.embedding_size"]),
        conditioning=ConditioningMode(manifest["generator.conditioning"]),
        external_encoder=ExternalEncoderKind(manifest["generator.external_encoder"]),
        external_dim=int(manifest["generator.external_dim"]),
        external_sidecar=manifest["generator.external_sidecar"] or None,
        max_decode_len=int(manifest["generator.max_decode_len"]),
    )
    model = GeneratorModel(vocab, gen_cfg, bundle)
    state = torch.load(directory / "weights.pt", weights_only=True)
    model.load_state_dict(state)
    model.freeze_stage1()
    model.eval()
    return model


# -- training loops ----------------------------------------------------------


class _BatchStream:
    """Endless stream of shuffled batches over a fixed item list."""

    def __init__(self, items, batch_size: int, seed: int):
        if not items:
            raise DataError("no training items")
        self.items = list(items)
        self.batch_size = min(batch_size, len(self.items))
        self.rng = random.Random(seed)
        self.order: list[int] = []

    def next_batch(self):
        if len(self.order) < self.batch_size:
            refill = list(range(len(self.items)))
            self.rng.shuffle(refill)
            self.order.extend(refill)
        take, self.order = self.order[: self.batch_size], self.order[self.batch_size :]
        return [self.items[i] for i in take]


def _split_holdout(items, fraction: float, seed: int):
    items = list(items)
    if len(items) < 2:
        return items, items
    rng = random.Random(seed)
    order = list(range(len(items)))
    rng.shuffle(order)
    n_held = max(1, int(len(items) * fraction))
    held = sorted(order[:n_held])
    kept = sorted(order[n_held:])
    return [items[i] for i in kept], [items[i] for i in held]


@dataclass
class Stage1Checkpoints:
    divae: Path | None = None
    laed: Path | None = None
    vae: Path | None = None


def _variant_stage1_needs(variant: ModelVariant) -> tuple[str, ...]:
    if variant is ModelVariant.HRED_VAE:
        return ("vae",)
    if variant is ModelVariant.HRED:
        return ()
    return ("divae", "laed")


def _eval_latent_loss(loss_fn, model, batch, seed: int) -> float:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            gen = torch.Generator().manual_seed(seed)
            lb = loss_fn(batch, model, generator=gen, tau=model.config.temperature_end) \
                if loss_fn is not vae_loss else loss_fn(batch, model, generator=gen)
            return float(lb.total)
    finally:
        model.train(was_training)


def train_stage1(
    config: ExperimentConfig,
    transfer: Corpus,
    output_dir,
    excluded: tuple[str, ...] = (),
) -> Stage1Checkpoints:
    """Train the stage-1 models the configured variant needs.

    The transfer corpus must already have overlap domains excluded; the
    exclusion list is recorded in each checkpoint manifest.  A 5% held-out
    split tracks that training actually reduced the loss.
    """
    if len(transfer) == 0:
        raise DataError("transfer corpus is empty (after exclusion?)")
    output_dir = Path(output_dir)
    needs = _variant_stage1_needs(config.variant)
    result = Stage1Checkpoints()
    if not needs:
        return result
    vocab = build_vocab(transfer, config.stage1_min_freq)
    base = config.base_seed
    common_extra = {
        "excluded": ",".join(excluded),
        "transfer_corpus": transfer.name,
        "base_seed": base,
    }

    train_dlgs, held_dlgs = _split_holdout(
        transfer.dialogues, 0.05, derive_seed(base, "stage1-holdout")
    )
    train_corpus = Corpus(transfer.name, tuple(train_dlgs))
    held_corpus = Corpus(transfer.name, tuple(held_dlgs))

    if "divae" in needs:
        result.divae = _train_divae_like(
            config, train_corpus, held_corpus, vocab, output_dir / "divae",
            LatentVariant.DI_VAE, common_extra,
        )
    if "vae" in needs:
        result.vae = _train_divae_like(
            config, train_corpus, held_corpus, vocab, output_dir / "vae",
            LatentVariant.VAE, common_extra,
        )
    if "laed" in needs:
        result.laed = _train_laed(
            config, train_corpus, held_corpus, vocab, output_dir / "laed", common_extra
        )
    return result


def _train_divae_like(config, train_corpus, held_corpus, vocab, out_dir, variant, extra):
    name = "divae" if variant is LatentVariant.DI_VAE else "vae"
    torch.manual_seed(derive_seed(config.base_seed, f"{name}-init"))
    model = LatentModel(vocab, config.latent, variant)
    gen = torch.Generator().manual_seed(derive_seed(config.base_seed, f"{name}-noise"))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    utterances = corpus_utterances(train_corpus)
    held = corpus_utterances(held_corpus)
    stream = _BatchStream(
        utterances, config.batch_size, derive_seed(config.base_seed, f"{name}-shuffle")
    )
    loss_fn = di_vae_loss if variant is LatentVariant.DI_VAE else vae_loss
    eval_seed = derive_seed(config.base_seed, f"{name}-eval")
    held_start = _eval_latent_loss(loss_fn, model, held, eval_seed)
    model.train()
    for step in range(config.stage1_steps):
        batch = stream.next_batch()
        if variant is LatentVariant.DI_VAE:
            lb = di_vae_loss(batch, model, tau=config.latent.tau_at(step), generator=gen)
        else:
            lb = vae_loss(batch, model, generator=gen)
        opt.zero_grad()
        lb.total.backward()
        opt.step()
    held_end = _eval_latent_loss(loss_fn, model, held, eval_seed)
    if held_end >= held_start:
        logger.warning("%s held-out loss did not improve: %.4f -> %.4f", name, held_start, held_end)
    model.eval()
    inventory = cluster_by_code(train_corpus, model) if variant is LatentVariant.DI_VAE else None
    ckpt_extra = dict(extra)
    ckpt_extra["heldout_loss_start"] = f"{held_start:.6f}"
    ckpt_extra["heldout_loss_end"] = f"{held_end:.6f}"
    save_latent_checkpoint(model, out_dir, ckpt_extra)
    if inventory is not None:
        _write_code_inventory(out_dir / "code_inventory.txt", inventory)
    return out_dir


def _write_code_inventory(path: Path, buckets) -> None:
    lines = [f"{code} {len(utts)}" for code, utts in buckets.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _eval_laed_loss(model, vst_batch, laed_batch, seed, joint) -> float:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            gen = torch.Generator().manual_seed(seed)
            tau = model.config.temperature_end
            total = float(laed_loss(laed_batch, model, generator=gen, tau=tau).total)
            if joint:
                total += float(di_vst_loss(vst_batch, model.vst, generator=gen, tau=tau).total)
            return total
    finally:
        model.train(was_training)


def _train_laed(config, train_corpus, held_corpus, vocab, out_dir, extra):
    torch.manual_seed(derive_seed(config.base_seed, "laed-init"))
    model = LaedModel(vocab, config.latent)
    gen = torch.Generator().manual_seed(derive_seed(config.base_seed, "laed-noise"))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    triples = corpus_vst_triples(train_corpus)
    pairs = corpus_laed_pairs(train_corpus)
    held_triples = corpus_vst_triples(held_corpus)
    held_pairs = corpus_laed_pairs(held_corpus)
    vst_stream = _BatchStream(
        triples, config.batch_size, derive_seed(config.base_seed, "laed-vst-shuffle")
    )
    pair_stream = _BatchStream(
        pairs, config.batch_size, derive_seed(config.base_seed, "laed-pair-shuffle")
    )
    eval_seed = derive_seed(config.base_seed, "laed-eval")
    held_start = _eval_laed_loss(model, held_triples, held_pairs, eval_seed, config.laed_joint)
    model.train()
    steps = config.stage1_steps
    if config.laed_joint:
        for step in range(steps):
            tau = config.latent.tau_at(step)
            loss = di_vst_loss(vst_stream.next_batch(), model.vst, tau=tau, generator=gen).total
            loss = loss + laed_loss(pair_stream.next_batch(), model, tau=tau, generator=gen).total
            opt.zero_grad()
            loss.backward()
            opt.step()
    else:
        vst_opt = torch.optim.Adam(model.vst.parameters(), lr=config.learning_rate)
        for step in range(steps):
            loss = di_vst_loss(
                vst_stream.next_batch(), model.vst, tau=config.latent.tau_at(step), generator=gen
            ).total
            vst_opt.zero_grad()
            loss.backward()
            vst_opt.step()
        for p in model.vst.parameters():
            p.requires_grad_(False)
        rest = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.Adam(rest, lr=config.learning_rate)
        for step in range(steps):
            loss = laed_loss(
                pair_stream.next_batch(), model, tau=config.latent.temperature_end, generator=gen
            ).total
            opt.zero_grad()
            loss.backward()
            opt.step()
        for p in model.vst.parameters():
            p.requires_grad_(True)
    held_end = _eval_laed_loss(model, held_triples, held_pairs, eval_seed, config.laed_joint)
    if held_end >= held_start:
        logger.warning("laed held-out loss did not improve: %.4f -> %.4f", held_start, held_end)
    model.eval()
    ckpt_extra = dict(extra)
    ckpt_extra["heldout_loss_start"] = f"{held_start:.6f}"
    ckpt_extra["heldout_loss_end"] = f"{held_end:.6f}"
    ckpt_extra["laed.joint"] = config.laed_joint
    save_latent_checkpoint(model, out_dir, ckpt_extra)
    return out_dir


def load_stage1_bundle(paths: Stage1Checkpoints | None) -> Stage1Bundle:
    bundle = Stage1Bundle()
    if paths is None:
        return bundle
    hashes = set()
    for name in ("divae", "laed", "vae"):
        path = getattr(paths, name)
        if path is None:
            continue
        model = load_latent_checkpoint(path)
        setattr(bundle, name, model)
        hashes.add(model.vocab.content_hash())
    if len(hashes) > 1:
        raise VocabMismatch("stage-1 checkpoints were trained with different vocabularies")
    return bundle


def train_stage2(
    config: ExperimentConfig,
    source: Corpus,
    target_seed: Corpus,
    stage1: Stage1Checkpoints | None,
    output_dir,
    run_seed: int | None = None,
) -> Path:
    """Train the generator on shuffled source plus few-shot target instances.

    Stage-1 weights are frozen; early stopping watches held-out
    source-domain loss with the configured patience.
    """
    run_seed = config.base_seed if run_seed is None else run_seed
    output_dir = Path(output_dir)
    mode = config.generator.conditioning
    needs = _variant_stage1_needs(config.variant)
    bundle = load_stage1_bundle(stage1)
    for name in needs:
        if getattr(bundle, name) is None:
            raise MissingStage1(
                f"variant {config.variant.value} needs stage-1 model {name!r}"
            )

    merged = Corpus(
        "stage2-train", tuple(source.dialogues) + tuple(target_seed.dialogues)
    )
    vocab = build_vocab(merged, config.min_freq)
    source_instances = corpus_instances(source)
    seed_instances = corpus_instances(target_seed)
    train_source, held_source = _split_holdout(
        source_instances, 0.05, derive_seed(run_seed, "stage2-holdout")
    )
    train_items = train_source + seed_instances

    torch.manual_seed(derive_seed(run_seed, "stage2-init"))
    model = GeneratorModel(vocab, config.generator, bundle)
    model.freeze_stage1()
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate)
    stream = _BatchStream(train_items, config.batch_size, derive_seed(run_seed, "stage2-shuffle"))

    def held_loss() -> float:
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                return float(hred_step_loss(held_source, model))
        finally:
            model.train(was_training)

    best = held_loss()
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    stale = 0
    model.train()
    for module in model._stage1_modules.values():
        module.eval()
    step = 0
    while step < config.stage2_max_steps:
        loss = hred_step_loss(stream.next_batch(), model, mode=mode)
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        if step % config.stage2_eval_every == 0:
            current = held_loss()
            if current < best - 1e-6:
                best = current
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= config.stage2_patience:
                    logger.info("early stop at step %d (held-out %.4f)", step, best)
                    break
    model.load_state_dict(best_state)
    model.eval()
    extra = {
        "variant": config.variant.value,
        "run_seed": run_seed,
        "target_domain": config.target_domain,
        "trained_steps": step,
    }
    return save_generator_checkpoint(model, output_dir, extra)


# -- evaluation and the experiment grid --------------------------------------


def canonical_entity(value: str) -> str:
    return " ".join(tokenize(value))


def instance_eval_pair(instance, hypothesis) -> EvalPair:
    entities = frozenset(
        canonical_entity(v) for v in instance.kb_values if canonical_entity(v)
    )
    return EvalPair(
        reference=tuple(instance.x_sys),
        hypothesis=tuple(hypothesis),
        kb_entities=entities,
    )


def evaluate_model(model: GeneratorModel, corpus: Corpus, domain: str) -> dict:
    """Greedy-decode every instance of the domain and score BLEU / entity F1."""
    instances = corpus_instances(corpus.restrict(domain))
    if not instances:
        raise DataError(f"no evaluable instances for domain {domain!r}")
    pairs = []
    for instance in instances:
        hyp = generate_response(instance, model)
        pairs.append(instance_eval_pair(instance, hyp))
    bleu = corpus_bleu(pairs)
    precision, recall, f1 = entity_f1(pairs)
    return {
        "bleu": round(bleu, 4),
        "entity_p": round(precision, 4),
        "entity_r": round(recall, 4),
        "entity_f1": round(f1, 4),
        "n_pairs": len(pairs),
    }


@dataclass
class RunResult:
    seed: int
    domain: str
    ratio: float
    bleu: float
    entity_f1: float
    entity_p: float
    entity_r: float
    wall_time: float


def run_experiment(config: ExperimentConfig, output_dir) -> EvalReport:
    """Full grid: stage-1 once, then stage-2 + evaluation per (ratio, run).

    Writes `report.txt` (deterministic mean±std table) and `runs.json`
    (per-run log, includes wall times) under the output directory.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _run_experiment_inner(config, output_dir)
    finally:
        torch.set_num_threads(n_threads)


def _run_experiment_inner(config: ExperimentConfig, output_dir: Path) -> EvalReport:
    if not config.target_domain:
        raise ConfigError("target_domain is required")
    main = load_corpus(config.main_corpus, config.main_format)
    if config.target_domain not in main.domains:
        raise DataError(f"target domain {config.target_domain!r} not in main corpus")
    source = main.without_domains({config.target_domain})
    target_pool = main.restrict(config.target_domain)
    eval_corpus = (
        load_corpus(config.eval_corpus, CorpusFormat.NORMALIZED_JSON)
        if config.eval_corpus
        else None
    )

    needs = _variant_stage1_needs(config.variant)
    stage1_paths: Stage1Checkpoints | None = None
    if needs:
        transfer = load_corpus(config.transfer_corpus, config.transfer_format)
        if config.exclusions is not None:
            excluded = tuple(config.exclusions)
            transfer_kept = transfer.without_domains(excluded)
        else:
            transfer_kept = exclude_overlap(transfer, config.target_domain)
            excluded = tuple(
                sorted(
                    d for d in transfer.domains if d not in transfer_kept.domains
                )
            )
        stage1_paths = train_stage1(config, transfer_kept, output_dir / "stage1", excluded)

    results: list[RunResult] = []
    for ratio in config.ratios:
        for i in range(config.runs):
            run_seed = config.base_seed + i
            t0 = time.perf_counter()
            spec = FewShotSpec(
                config.target_domain, ratio, derive_seed(run_seed, "sampling")
            )
            seed_corpus = sample_few_shot(main, spec)
            ckpt_dir = output_dir / f"stage2_r{ratio:g}_s{i}"
            train_stage2(config, source, seed_corpus, stage1_paths, ckpt_dir, run_seed)
            model = load_generator_checkpoint(ckpt_dir)
            if eval_corpus is not None:
                eval_on = eval_corpus
            else:
                seed_ids = {d.id for d in seed_corpus.dialogues}
                held = tuple(d for d in target_pool.dialogues if d.id not in seed_ids)
                eval_on = Corpus("eval", held if held else target_pool.dialogues)
            scores = evaluate_model(model, eval_on, config.target_domain)
            results.append(
                RunResult(
                    seed=run_seed,
                    domain=config.target_domain,
                    ratio=ratio,
                    bleu=scores["bleu"],
                    entity_f1=scores["entity_f1"],
                    entity_p=scores["entity_p"],
                    entity_r=scores["entity_r"],
                    wall_time=round(time.perf_counter() - t0, 3),
                )
            )

    report = EvalReport()
    for ratio in config.ratios:
        row = f"{config.variant.value}@{ratio * 100:g}%"
        ratio_results = [r for r in results if r.ratio == ratio]
        report.add(row, config.target_domain, "bleu", [r.bleu for r in ratio_results])
        report.add(
            row, config.target_domain, "entity_f1", [r.entity_f1 for r in ratio_results]
        )
    report.per_run = [vars(r) for r in results]
    (output_dir / "report.txt").write_text(report.format_table(), encoding="utf-8")
    (output_dir / "runs.json").write_text(
        json.dumps(report.per_run, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return report
