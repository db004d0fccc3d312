"""Prototype: synthetic copy task (criterion 5 calibration)."""
import random
import time
import warnings

import torch

from fewshot_dlg.corpus import (
    Corpus, Dialogue, KBRecord, Speaker, Turn, build_vocab, corpus_instances,
)
from fewshot_dlg.generator import (
    GeneratorConfig, GeneratorModel, generate_response, hred_step_loss,
)

warnings.simplefilter("ignore")

LETTERS = "abcdefghijklmnopqrstuvwxyz0123456789"


def rand_value(rng):
    return "".join(rng.choice(LETTERS) for _ in range(4))


def make_copy_dialogue(i, rng):
    value = rand_value(rng)
    return Dialogue(
        str(i), "copytask",
        (
            Turn(Speaker.USER, "what is the code ?"),
            Turn(Speaker.SYSTEM, f"the code is {value} ."),
        ),
        (KBRecord((("code", value),)),),
    ), value


def make_corpus(n, seed):
    rng = random.Random(seed)
    dialogues, values = [], []
    for i in range(n):
        d, v = make_copy_dialogue(i, rng)
        dialogues.append(d)
        values.append(v)
    return Corpus("copy", tuple(dialogues)), values


def recovery(model, insts, values, force_gate=None):
    hit = 0
    for inst, v in zip(insts, values):
        out = generate_response(inst, model, force_gate=force_gate)
        if v in out:
            hit += 1
    return hit / len(insts)


def main(steps=800, batch=16, lr=0.003, seed=0):
    train, _ = make_corpus(200, seed)
    test, test_values = make_corpus(50, seed + 1000)
    vocab = build_vocab(train, min_freq=3)
    print("vocab:", len(vocab), "(values OOV:", "zq7x" not in vocab.index, ")")
    insts = corpus_instances(train)
    test_insts = corpus_instances(test)

    torch.manual_seed(seed)
    cfg = GeneratorConfig(
        utterance_hidden=32, dialogue_hidden=48, embedding_size=24, max_decode_len=10
    )
    model = GeneratorModel(vocab, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    shuf = random.Random(seed + 1)
    idx = list(range(len(insts)))
    pos = 0
    t0 = time.time()
    model.train()
    for step in range(steps):
        if pos + batch > len(idx):
            shuf.shuffle(idx)
            pos = 0
        chunk = [insts[i] for i in idx[pos:pos + batch]]
        pos += batch
        loss = hred_step_loss(chunk, model)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            print(f"step {step}: loss {float(loss):.4f} ({time.time()-t0:.0f}s)")
    model.eval()
    rec = recovery(model, test_insts, test_values)
    rec_novocab = recovery(model, test_insts, test_values, force_gate=1.0)
    print(f"recovery with copy: {rec:.2%}; gate forced to 1: {rec_novocab:.2%}")
    print(f"total {time.time()-t0:.0f}s")
    sample = generate_response(test_insts[0], model)
    print("sample:", sample, "expected value:", test_values[0])


if __name__ == "__main__":
    main()
