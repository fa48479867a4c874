"""Score a few responses with corpus BLEU and micro entity F1."""

from comet.metrics import corpus_bleu, entity_f1

refs = ["tom's_house is 6_miles away at 580_van_ness_ave .".split(), "there is no traffic .".split()]
hyps = ["tom's_house is 4_miles away at 580_van_ness_ave .".split(), "there is heavy traffic .".split()]
gold_entities = [["tom's_house", "6_miles", "580_van_ness_ave"], ["no"]]
pred_entities = [["tom's_house", "4_miles", "580_van_ness_ave"], ["heavy"]]

print(f"BLEU {corpus_bleu(hyps, refs):.2f} (identity: {corpus_bleu(refs, refs):.1f})")
scores = entity_f1(pred_entities, gold_entities, ["navigate", "navigate"])
print(f"entity P {scores['precision']:.3f} R {scores['recall']:.3f} F1 {scores['f1']:.3f}")
print("per domain:", {d: round(v["f1"], 3) for d, v in scores["per_domain"].items()})
