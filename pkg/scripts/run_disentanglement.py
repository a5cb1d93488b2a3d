"""fs_only / fi_only probe accuracies for every benchmark subject."""

from _common import bench, parser

from disenbooth.experiments import disentanglement


def main():
    p = parser(__doc__)
    p.add_argument("--subjects", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    b = bench(args)
    print("subject,fs_only_subject,fs_only_background,fi_only_background_color,fi_only_subject")
    for sid in args.subjects:
        r = disentanglement(b, sid, args.seed)
        print(f"{sid},{r.fs_only[0]:.3f},{r.fs_only[1]:.3f},{r.fi_only[1]:.3f},{r.fi_only[0]:.3f}", flush=True)


if __name__ == "__main__":
    main()
