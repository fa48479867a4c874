"""Train a small model on synthetic dialogues, then generate a response for an unseen query."""

from comet.config import ModelConfig
from comet.corpus import build_vocab, generate_synthetic
from comet.kb import KnowledgeBase
from comet.model import greedy_generate
from comet.training import train

corpus = generate_synthetic(seed=3, n_dialogues=60, n_domains=2)
tr, dev = corpus.subset(range(50)), corpus.subset(range(50, 60))
config = ModelConfig.desk(max_steps=2000, eval_every=500, learning_rate=1e-3, dropout_prob=0.0, kb_mask_prob=0.0, seed=0)


def report(step, model, record):
    print(f"step {step:4d}  dev BLEU {record['bleu']:6.2f}  dev entity F1 {record['f1']:.3f}")


result = train(tr, config, dev, vocab=build_vocab(tr), on_eval=report)
print(f"best dev F1 {result.best_dev_f1:.3f} at step {result.best_step}")

query = dev.dialogues[0]
gen = greedy_generate(result.model, query.turns[:1], query.kb)
print("user:   ", query.turns[0].text)
print("sketch: ", " ".join(gen.sketch))
print("reply:  ", " ".join(gen.response))
print("gold:   ", query.turns[1].text)
# gate per position and decoder layer: 1 reads the dialogue history, 0 reads the KB memory
for token, per_layer in zip(gen.sketch, gen.gates):
    print(f"  {token:<12} " + " ".join(f"{g:.2f}" for g in per_layer))
