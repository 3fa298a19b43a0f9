# Shuffle rationales across questions and check that the mismatch latent
# separates clean from shuffled inputs.
from dataclasses import replace
from importlib import resources

import numpy as np

from vpgm.data import load_questions
from vpgm.gateway import MockProvider
from vpgm.graph import load_structure
from vpgm.inference import run_question
from vpgm.metrics import derangement, latent_analysis, make_noisy_control
from vpgm.prompts import ParsedReply, render_reply

fixtures = resources.files("vpgm") / "fixtures"
structure = load_structure(fixtures / "structure.json")
clean_qs = load_questions(fixtures / "test.jsonl")
noisy_qs = make_noisy_control(clean_qs, seed=17)
for a, b in zip(clean_qs, noisy_qs):
    print(a.question_id, "|", a.rationale[:40], "->", b.rationale[:40])

print(derangement(8, np.random.default_rng(3)))

# scripted model: high Z2 and correct on clean rationales, low Z2 and wrong on shuffled ones
script = {}
for q in clean_qs:
    wrong = next(lab for lab in q.labels if lab != q.gold_label)
    for i in range(3):
        script[f"{q.question_id}/{i}"] = render_reply(ParsedReply(q.gold_label, {"Z1": 0.8, "Z2": 0.9}, 0.8))
        script[f"{q.question_id}-noisy/{i}"] = render_reply(ParsedReply(wrong, {"Z1": 0.8, "Z2": 0.2}, 0.6))
provider = MockProvider(script)
noisy_qs = [replace(q, question_id=q.question_id + "-noisy") for q in noisy_qs]

clean = [run_question(structure, q, 3, provider) for q in clean_qs]
noisy = [run_question(structure, q, 3, provider) for q in noisy_qs]
res = latent_analysis(clean, noisy, "Z2")
print("mean P(Z2)", res.mean_prob["clean"]["Z2"], res.mean_prob["noisy"]["Z2"])
print("identification", res.identification)
print("Pcc(Z2, correct) pooled", res.pcc["pooled"]["Z2"])
