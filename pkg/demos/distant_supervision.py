"""Resolve ambiguous response entities to KB rows and turn the response into a sketch."""

from comet.corpus import Corpus, Dialogue, EntitySpan, Turn, build_vocab
from comet.kb import KnowledgeBase
from comet.config import ModelConfig
from comet.training import make_examples

kb = KnowledgeBase(
    ("poi", "traffic", "distance"),
    (("Philz", "no", "4 miles"), ("Tom's house", "no", "6 miles"), ("Safeway", "heavy", "2 miles")),
    "navigate",
)
dialogue = Dialogue("demo", "navigate", kb, (
    Turn("user", "where does my friend live ?"),
    Turn("system", "Tom's house is 6 miles away .", (EntitySpan(0, 2, "poi", 1), EntitySpan(3, 5, "distance", 1))),
    Turn("user", "any traffic ?"),
    Turn("system", "there is no traffic on the way .", (EntitySpan(2, 3, "traffic"),)),
))
corpus = Corpus((dialogue,))
examples = make_examples(corpus, build_vocab(corpus), ModelConfig.desk())
memory = examples[-1].input.memory

for ex in examples:
    print("sketch:", " ".join(ex.sketch))
    for pos, link in zip(ex.tag_positions, ex.links):
        entry = memory[link]
        print(f"  {ex.sketch[pos]:<10} -> row {entry.row} {entry.column}={entry.token}")
# "no" occurs in rows 0 and 1; the row sharing the earlier entities wins
