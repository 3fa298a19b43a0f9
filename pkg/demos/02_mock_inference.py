# Run the bundled six-question fixture through a scripted provider and
# look at the per-question aggregates.
from importlib import resources

from vpgm.data import load_questions
from vpgm.gateway import MockProvider
from vpgm.graph import load_structure
from vpgm.inference import consistency_baseline, run_question

fixtures = resources.files("vpgm") / "fixtures"
structure = load_structure(fixtures / "structure.json")
questions = load_questions(fixtures / "test.jsonl")
provider = MockProvider.from_file(fixtures / "mock_script.json")

for q in questions:
    rec = run_question(structure, q, 3, provider)
    answers = [(s.answer_label, s.final_prob) for s in rec.samples]
    print(q.question_id, "gold", q.gold_label, "samples", answers, "dropped", rec.dropped)
    print("   expectation", [round(p, 4) for p in rec.vpgm_dist], "chosen", rec.chosen_label)
    print("   consistency", consistency_baseline(rec.samples))

print(len(provider.calls), "completions issued")
