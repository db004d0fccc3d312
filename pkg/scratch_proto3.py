"""Prototype: few-shot transfer gap calibration (criterion 7)."""
import sys
import time
import warnings
from pathlib import Path

warnings.simplefilter("ignore")
import torch

from fewshot_dlg.corpus import save_corpus
from fewshot_dlg.generator import ConditioningMode, GeneratorConfig
from fewshot_dlg.latent import LatentConfig
from fewshot_dlg.pipeline import ExperimentConfig, ModelVariant, run_experiment
from fewshot_dlg.synthetic import build_task_corpus, build_transfer_corpus


def make_config(variant, out, stage1_steps, stage2_steps, runs=5):
    return ExperimentConfig(
        transfer_corpus=str(out / "transfer.json"),
        main_corpus=str(out / "task.json"),
        target_domain="navigate",
        ratios=(0.01,),
        runs=runs,
        base_seed=100,
        variant=variant,
        batch_size=24,
        min_freq=1,
        stage1_min_freq=2,
        exclusions=("STORE_DETAILS",),
        stage1_steps=stage1_steps,
        stage2_max_steps=stage2_steps,
        stage2_eval_every=60,
        stage2_patience=3,
        learning_rate=0.003,
        latent=LatentConfig(
            M=4, K=4, embedding_size=24, hidden_size=48, context_hidden_size=48,
            anneal_steps=int(stage1_steps * 0.75), temperature=1.5, temperature_end=0.4,
            word_dropout=0.25,
        ),
        generator=GeneratorConfig(
            utterance_hidden=32, dialogue_hidden=48, embedding_size=24,
            max_decode_len=8,
            conditioning=(
                ConditioningMode.CODE_CONCAT
                if variant is ModelVariant.HRED_LAED
                else ConditioningMode.NONE
            ),
        ),
    )


def main(stage1_steps=500, stage2_steps=420, runs=5):
    out = Path("/tmp/proto3")
    out.mkdir(exist_ok=True)
    save_corpus(build_task_corpus(100, seed=7), out / "task.json")
    save_corpus(build_transfer_corpus(20, seed=11), out / "transfer.json")
    scores = {}
    for variant in (ModelVariant.HRED, ModelVariant.HRED_LAED):
        t0 = time.time()
        cfg = make_config(variant, out, stage1_steps, stage2_steps, runs)
        report = run_experiment(cfg, out / f"exp_{variant.value}")
        f1s = [r["entity_f1"] for r in report.per_run]
        bleus = [r["bleu"] for r in report.per_run]
        scores[variant.value] = f1s
        print(
            f"{variant.value}: F1 per seed {['%.1f' % f for f in f1s]}"
            f" mean {sum(f1s)/len(f1s):.1f} | BLEU mean {sum(bleus)/len(bleus):.1f}"
            f" ({time.time()-t0:.0f}s)"
        )
    gap = sum(scores["HRED_LAED"]) / runs - sum(scores["HRED"]) / runs
    print(f"GAP (HRED_LAED - HRED): {gap:.2f} points")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:]]
    main(*args)
