"""Print the parameter ledger for the full and the distilled (block 1) model."""

from poseloc.model import EncoderConfig, count_params, distilled_names, init_params

if __name__ == "__main__":
    cfg = EncoderConfig()
    params = init_params(cfg)
    full = count_params(params)
    kept = count_params(params, distilled_names(cfg))
    groups = {}
    for name, value in params.items():
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + value.size
    for group, n in groups.items():
        print(f"{group:10s} {n:8d}")
    print(f"full       {full:8d}")
    print(f"distilled  {kept:8d}  ({100 * (1 - kept / full):.2f}% smaller)")
