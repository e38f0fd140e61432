import argparse
import os
import sys
import time
from typing import Dict, List

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pandas as pd

from src.coordinator import ServerModel, baseline_centralized, baseline_independent, run_federated
from src.covariance_engine import Rates
from src.features.artifact_store import write_csv
from src.features.experiment_runner import build_clients
from src.lti_world import BlockLtiSystem, make_scalar_benchmark, make_two_client_benchmark, simulate
from src.matrix_kernels import pair_label


class BaselineComparison:
    """Centralized least squares vs FedGC vs clients learning alone, on one shared trajectory."""

    def __init__(self, world: BlockLtiSystem, rates: Rates, T: int, seed: int):
        self.world = world
        self.rates = rates
        self.T = T
        self.trajectory = simulate(world, T, seed)

    def _errors(self, A_hat) -> Dict[str, float]:
        return {
            f"err_A_{pair_label(*k)}": float(np.linalg.norm(A_hat[k] - self.world.A_block(*k)))
            for k in self.world.idx.pairs()
        }

    def _server(self) -> ServerModel:
        return ServerModel.from_world(self.world, gamma=self.rates.gamma, lambda_s=self.rates.lambda_s)

    def run(self) -> List[Dict[str, float]]:
        rows = []

        start = time.time()
        rows.append({"method": "centralized", **self._errors(baseline_centralized(self.trajectory, self.world.idx)),
                     "wall_time_s": time.time() - start})

        start = time.time()
        log = run_federated(self.world, self.trajectory, build_clients(self.world, self.rates), self._server(), self.T)
        rows.append({"method": "federated", **self._errors(log.server.A_hat), "wall_time_s": time.time() - start})

        start = time.time()
        log = baseline_independent(self.world, self.trajectory, build_clients(self.world, self.rates), self._server(), self.T)
        rows.append({"method": "independent", **self._errors(log.server.A_hat), "wall_time_s": time.time() - start})
        return rows


def main():
    parser = argparse.ArgumentParser(description="Baseline comparison table")
    parser.add_argument("--system", choices=["scalar", "two_client"], default="scalar")
    parser.add_argument("--T", type=int, default=3000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--gamma", type=float, default=0.05)
    parser.add_argument("--eta", type=float, default=0.01)
    parser.add_argument("--ridge", type=float, default=0.0, help="lambda_s = lambda_c")
    parser.add_argument("--output", type=str, default="results/baselines.csv")
    args = parser.parse_args()

    world = make_scalar_benchmark() if args.system == "scalar" else make_two_client_benchmark()
    rates = Rates(gamma=args.gamma, eta1=args.eta, eta2=args.eta, lambda_s=args.ridge, lambda_c=args.ridge)
    print(f"[*] Baseline comparison on {world.name} (T={args.T}, seed={args.seed})")

    table = pd.DataFrame(BaselineComparison(world, rates, args.T, args.seed).run())
    write_csv(args.output, table.drop(columns=["wall_time_s"]))
    print(table.to_string(index=False))
    print(f"\n[*] Table saved to {args.output}")


if __name__ == "__main__":
    main()
