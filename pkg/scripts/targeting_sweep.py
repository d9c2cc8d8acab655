"""Adapt every layer vs only the upper half of the network.

Writes record.json, metrics.csv and config.resolved.json to the output directory.
"""

from _common import parser, run


def main():
    args = parser(__doc__.splitlines()[0], "targeting_sweep.toml").parse_args()
    record, out = run(args, "runs/targeting_sweep")
    sweep = record["results"]["sweep"]
    print(f"{'value':<10} {'params':>7} {'train':>10} {'val':>10}")
    for s in sweep["summary"]:
        print(f"{str(s['value']):<10} {s['param_budget']:>7} {s['mean_final_train_loss']:>10.5f} {s['mean_final_val_loss']:>10.5f}")
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
