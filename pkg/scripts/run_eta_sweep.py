"""Identity-vs-eta curves and their Spearman correlation over sampling seeds."""

from _common import bench, parser

from disenbooth.evaluation import rank_correlation
from disenbooth.experiments import eta_monotonicity


def main():
    p = parser(__doc__)
    p.add_argument("--subject", type=int, default=0)
    args = p.parse_args()
    median, curves = eta_monotonicity(bench(args), args.subject)
    for seed, curve in enumerate(curves):
        print(f"seed {seed}: " + " ".join(f"{eta:.1f}:{c:.4f}" for eta, c in curve)
              + f"  spearman {rank_correlation(curve):.2f}")
    print(f"median spearman {median:.2f}")


if __name__ == "__main__":
    main()
