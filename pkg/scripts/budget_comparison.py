"""LoRA rank r vs NEAT with 2r hidden units, plus NEAT built from the trained LoRA.

On the projection-invariant task the built NEAT parameters must reproduce the
LoRA loss exactly; the independently trained NEAT arm is reported only.
"""

import numpy as np

from _common import parser, run


def main():
    args = parser(__doc__.splitlines()[0], "invariant_compare.toml").parse_args()
    record, out = run(args, "runs/budget_comparison")
    cmp = record["results"]["comparison"]
    print(f"mode: {cmp['mode']}")
    for arm in ("lora", "neat"):
        runs = [m for m in cmp["runs"] if m["arm"] == arm]
        final = [m["train_loss"][-1] for m in runs]
        print(f"{arm:<18} params={runs[0]['param_budget']:<6} mean final train loss {np.mean(final):.6g}")
    built = cmp["constructed"]
    print(f"{'neat (constructed)':<18} params={built[0]['param_budget']:<6} mean final train loss "
          f"{np.mean([c['train_loss'] for c in built]):.6g}")
    print(f"max |constructed - lora| loss gap: {cmp['max_constructed_gap']:.3e}")
    for w in cmp["warnings"]:
        print(f"note: {w}")
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
