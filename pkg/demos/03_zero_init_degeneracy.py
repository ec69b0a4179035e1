"""Why a zero-filled prediction segment starves the decoder.

With zero placeholders and unbiased query/key projections, every score
touching a prediction token is exactly zero.  A start token alone keeps those
zeros; adding positional embeddings removes them, but the prediction rows then
carry position and no values.
"""

from gbt.evaluation import zero_init_diagnostic

for regime in ("zero", "start_token", "start_token_posemb"):
    r = zero_init_diagnostic(16, 4, 4, regime, seed=0)
    print(f"{regime:20s} {r.verdict}")
    print(f"{'':20s} max |start->pred| {r.max_abs_start_pred:.3g}  max |pred->pred| {r.max_abs_pred_pred:.3g}")

# biased projections are the negative control: the zeros disappear
print("zero + bias         ", zero_init_diagnostic(16, 4, 4, "zero", seed=0, bias=True).verdict)
