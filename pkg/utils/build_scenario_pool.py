import argparse
from pathlib import Path

import numpy as np

from ccopf.uncertaintylib import ScenarioPool, required_scenario_count, synthetic_pool

DEFAULT_SHAPE = (2.0, 2.0)


def _parse_floats(raw: str) -> list[float]:
    return [float(tok) for tok in raw.split(",") if tok.strip()]


def build_pool(
    farms: list[int],
    rated: list[float],
    shape_a: list[float],
    shape_b: list[float],
    n: int,
    correlation: float = 0.0,
    seed: int | None = None,
) -> ScenarioPool:
    """
    Generate a pool in MW with a uniform pairwise correlation between all farms.

    Single-value shape lists are broadcast to every farm.
    """
    n_w = len(farms)
    if len(shape_a) == 1:
        shape_a = shape_a * n_w
    if len(shape_b) == 1:
        shape_b = shape_b * n_w

    corr = np.full((n_w, n_w), correlation)
    np.fill_diagonal(corr, 1.0)
    return synthetic_pool(farms, rated, shape_a, shape_b, n, correlation=corr, seed=seed)


def main() -> None:  # noqa: D103
    description = "Write a synthetic wind scenario pool (MW) for a ccopf study."
    epilog = "NOTE: Without --n, the minimum count for the rectangular set at --epsilon is used."
    parser = argparse.ArgumentParser(description=description, epilog=epilog)
    parser.add_argument("dest", type=Path)
    parser.add_argument("--farms", type=str, required=True, help="Comma separated farm buses")
    parser.add_argument("--rated", type=str, required=True, help="Comma separated ratings, MW")
    parser.add_argument("--shape_a", type=str, default=str(DEFAULT_SHAPE[0]))
    parser.add_argument("--shape_b", type=str, default=str(DEFAULT_SHAPE[1]))
    parser.add_argument("--correlation", type=float, default=0.0)
    parser.add_argument("--n", type=int, default=None)
    parser.add_argument("--epsilon", type=float, default=0.05)
    parser.add_argument("--beta", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    farms = [int(tok) for tok in args.farms.split(",")]
    n = args.n or required_scenario_count(args.epsilon, args.beta, len(farms))
    pool = build_pool(
        farms=farms,
        rated=_parse_floats(args.rated),
        shape_a=_parse_floats(args.shape_a),
        shape_b=_parse_floats(args.shape_b),
        n=n,
        correlation=args.correlation,
        seed=args.seed,
    )
    pool.to_csv(args.dest)
    print(f"{pool.n_scenarios} scenarios for {pool.n_farms} farm(s) written to '{args.dest}'")


if __name__ == "__main__":
    main()
