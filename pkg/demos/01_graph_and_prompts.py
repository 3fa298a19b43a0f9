# Build a four-latent structure, validate it, render the inference prompt
# and parse a reply back.
from vpgm.data import QuestionInput
from vpgm.graph import FOUR_LATENT_EXAMPLE_EDGES, PgmStructure, parents_of, topological_order, validate
from vpgm.prompts import ParsedReply, build_inference_prompt, parse_reply, render_reply

structure = PgmStructure.from_edges(FOUR_LATENT_EXAMPLE_EDGES, task_description="visual question answering")
print(validate(structure).ok)
print(topological_order(structure))
for v in structure.latent_ids:
    print(v, "<-", parents_of(structure, v))

# a cycle is reported with its path
cyclic = PgmStructure.from_edges(list(FOUR_LATENT_EXAMPLE_EDGES) + ["Z4->Z3"])
for violation in validate(cyclic).violations:
    print(violation.code, violation.message)

question = QuestionInput("demo-1", "Which animal is shown?", ("cat", "dog", "horse"),
                         caption="A small dog on a sofa.", rationale="Dogs have floppy ears.", gold_label="B")
prompt = build_inference_prompt(structure, question)
print(prompt.text[:600])

reply_text = render_reply(ParsedReply("B", {"Z1": 0.8, "Z2": 0.7, "Z3": 0.9, "Z4": 0.75}, 0.82))
print(reply_text)
print(parse_reply(reply_text, structure))

# free-text replies fall back to line-by-line extraction
print(parse_reply("Z1: 80%\nZ2: 0.7\nZ3: 0.9\nZ4: 0.75\nP(Y|Z): 0.82\nanswer: B", structure))
