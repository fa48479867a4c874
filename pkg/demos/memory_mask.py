"""Build the memory mask for a small navigation KB and show which entries can see each other."""

from comet.kb import KnowledgeBase, build_memory_mask, flatten_kb

kb = KnowledgeBase(
    ("poi", "poi_type", "address"),
    (
        ("Stanford Express Care", "hospital", "214 El Camino Real"),
        ("Tom's house", "friend's house", "580 Van Ness Ave"),
        ("Philz", "coffee or tea place", "583 Alester Ave"),
    ),
    "navigate",
)
memory = flatten_kb(kb)
mask = build_memory_mask(memory)

print(f"{len(memory)} entries, mask {mask.size}x{mask.size}, {mask.n_allowed()} allowed pairs")
print(mask.render())
# each entry sees the summary slot and its own row, nothing else
tom = memory.tokens.index("tom's_house")
print("tom's_house attends to:", ["[SUM]"] + [memory.tokens[j - 1] for j in range(1, mask.size) if mask.allowed[tom + 1, j]])
