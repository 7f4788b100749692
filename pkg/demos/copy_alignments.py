"""Train PAG briefly on the copy task and print its alignments and commit pattern.

Takes about a minute.  The alignment of a trained model runs along the
diagonal; steps marked '.' followed the plan without recomputing it.
"""
import numpy as np

from plangen.decode import greedy_decode
from plangen.model import ModelConfig, Seq2SeqModel
from plangen.planner import PlannerConfig
from plangen.tasks import gen_copy_task
from plangen.training import TrainConfig, Trainer, evaluate

train = gen_copy_task(8, 3, 10, 5000, np.random.default_rng(1))
valid = gen_copy_task(8, 3, 10, 100, np.random.default_rng(2))
pc = PlannerConfig(mode="pag", k=10, align_hidden=64, dense_switch_grad=True)
model = Seq2SeqModel(ModelConfig(len(train.vocab), len(train.vocab), seed=0, planner=pc))
trainer = Trainer(model, train, TrainConfig(learning_rate=1e-3, max_updates=3000, log_interval=500,
                                            eval_interval=0))
for row in trainer.run().rows:
    print(f"update {row.update:5d}  nll {row.nll:.3f}  penalty {row.commit_penalty:.2e}")
print("validation exact match:", evaluate(model, valid))

shades = " .:-=+*#%@"
src = valid[0].source
out = greedy_decode(model, src, 2 * len(src) + 2)
print("source:", " ".join(train.vocab.decode(src)))
for tok, g, row in zip(out.tokens, out.switches, out.alignments):
    cells = "".join(shades[min(9, int(a * 10))] for a in row)
    print(f"{train.vocab.decode([tok])[0]:>4s} {'C' if g else '.'} |{cells}|")
