"""fs_only subject accuracy of the full method against its ablations over training seeds."""

from _common import bench, parser

from disenbooth.experiments import ablation_directionality


def main():
    p = parser(__doc__)
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--variants", nargs="+", default=["full", "no_L2", "no_L3", "no_adapter"])
    args = p.parse_args()
    table = ablation_directionality(bench(args), args.subject, variants=tuple(args.variants))
    for name, accs in table.items():
        print(f"{name:>10}: " + " ".join(f"{a:.3f}" for a in accs))


if __name__ == "__main__":
    main()
