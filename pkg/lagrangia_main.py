"""
Main Script for Lagrangia
=========================

Command-line front end for sparse Lagrangian identification:

1. generate  - simulate training trajectories (clean + noisy files)
2. fit       - learn the sparse Lagrangian (case I, II or III)
3. validate  - roll the learned model out against the true simulator
4. report    - rendered Lagrangian, coefficient table, rollout CSV, summary
5. sweep     - informational noise sweep over sigmas and seeds

Dependencies:
    pip install -r requirements.txt

Usage:
    python lagrangia_main.py generate --config configs/single_pendulum_desk.json
    python lagrangia_main.py fit --config configs/single_pendulum_desk.json
    python lagrangia_main.py validate --config configs/single_pendulum_desk.json
    python lagrangia_main.py report --config configs/single_pendulum_desk.json

Exit codes:
    0 success, 2 configuration error, 3 non-convergence, 4 I/O error
"""

import argparse
import sys
from typing import List, Optional

from colorama import Fore, Style
from dotenv import load_dotenv

from console import console
from dynamics import load_dataset
from exceptions import ConfigError, DatasetParseError, LagrangiaError, NonConvergenceError
from optimizer import TrainReport
from pipeline import (
    RunConfig,
    ValidationReport,
    fit,
    generate,
    load_config,
    load_model,
    report,
    sweep,
    validate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4


class LagrangiaApp:
    """Runs one subcommand against a loaded RunConfig"""

    def __init__(self, config: RunConfig):
        self.config = config
        console.banner()

    def _print_summary(self, title: str, rows: List[tuple]):
        """Green box followed by ▸ name → value lines"""
        if not console.verbose:
            return
        print(f"\n{Fore.GREEN}╔{'═'*78}╗")
        print(f"{Fore.GREEN}║{title:^78}║")
        print(f"{Fore.GREEN}╚{'═'*78}╝{Style.RESET_ALL}\n")
        for name, value in rows:
            print(f"  {Fore.CYAN}▸{Style.RESET_ALL} {name:14} → {Fore.BLUE}{value}{Style.RESET_ALL}")

    def generate(self) -> int:
        written = generate(self.config)
        self._print_summary("✅ DATASETS WRITTEN", [(label, path) for label, path in written.items()])
        return EXIT_OK

    def fit(self, dataset_path: Optional[str] = None) -> int:
        dataset = load_dataset(dataset_path) if dataset_path else None
        model, train_report = fit(self.config, dataset)
        self._display_model_preview(model, train_report)
        if not train_report.converged:
            raise NonConvergenceError(train_report.error or
                                      f"final cost {train_report.final_cost:.4g} above the relaxed tolerance")
        return EXIT_OK

    def validate(self, model_path: Optional[str] = None) -> int:
        model = load_model(model_path or self.config.out / "fit" / "model.json")
        outcome = validate(model, self.config)
        self._print_summary("✅ VALIDATION COMPLETE", [
            ("Mode", outcome.mode),
            ("Structure", outcome.verdict),
            ("Extra terms", ", ".join(outcome.extra_terms) or "-"),
            ("Missing terms", ", ".join(outcome.missing_terms) or "-"),
            ("Mean RMSE", f"{outcome.mean_rmse:.4g}"),
            ("Divergent", len(outcome.divergent)),
        ])
        return EXIT_OK

    def report(self, model_path: Optional[str] = None) -> int:
        model = load_model(model_path or self.config.out / "fit" / "model.json")
        validation_dir = self.config.out / "validation"
        if (validation_dir / "validation.json").exists():
            outcome = ValidationReport.load(validation_dir)
        else:
            console.warn("No saved validation found, running validate first")
            outcome = validate(model, self.config)
        train_path = self.config.out / "fit" / "train_report.json"
        train_report = TrainReport.load(train_path) if train_path.exists() else None
        paths = report(model, outcome, self.config.out / "report", train_report)
        self._print_summary("✅ REPORT WRITTEN", [(name, path) for name, path in paths.items()])
        return EXIT_OK

    def sweep(self, sigmas: List[float], seeds: List[int]) -> int:
        results = sweep(self.config, sigmas, seeds)
        self._print_summary("✅ SWEEP COMPLETE", [
            (f"σ = {sigma}", f"{row['verdicts']}  RMSE {row['mean_rmse']}") for sigma, row in results.items()
        ])
        return EXIT_OK

    def _display_model_preview(self, model, train_report):
        """Learned Lagrangian with a quick-stats box"""
        if not console.verbose:
            return
        console.section("LEARNED LAGRANGIAN", "🔍")
        print(f"{Fore.GREEN}●{Style.RESET_ALL} L = {Fore.WHITE}{model.render(3) or '0'}{Style.RESET_ALL}\n")
        for key, value in model.coefficient_map().items():
            term = model.library[model.library.index_of(key)]
            print(f"{Fore.YELLOW}  ├─{Style.RESET_ALL} {term.display():<24} {value: .4f}")

        status = f"{Fore.GREEN}converged" if train_report.converged else f"{Fore.RED}not converged"
        print(f"\n{Fore.CYAN}┌{'─'*78}┐")
        print(f"│ {Fore.WHITE}Quick Stats:{' '*66}{Fore.CYAN}│")
        stats = (f"▸ Terms: {len(model.coefficient_map()):<4} ▸ Stages: {train_report.stages_used:<3} "
                 f"▸ Cost: {train_report.final_cost:<10.3g}")
        print(f"│ {Fore.GREEN}{stats:<60}{status:<26}{Fore.CYAN}│")
        print(f"└{'─'*78}┘{Style.RESET_ALL}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lagrangia",
        description="Sparse Lagrangian identification from trajectory data",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
{Fore.CYAN}Examples:{Style.RESET_ALL}
  %(prog)s generate --config configs/cart_pendulum_desk.json          # Simulate datasets
  %(prog)s fit --config configs/cart_pendulum_desk.json --sigma 0.001  # Fit the noisy set
  %(prog)s fit --config configs/single_pendulum_desk.json --case 2     # Passive, case II
  %(prog)s validate --config configs/cart_pendulum_desk.json           # Rollout check
  %(prog)s report --config configs/cart_pendulum_desk.json --out runs/x
  %(prog)s sweep --config configs/single_pendulum_desk.json --sigmas 0 0.001 0.02 --seeds 0 1 2 3 4
        """,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="Run config (JSON)")
    common.add_argument("--seed", type=int, help="Override every seed in the config")
    common.add_argument("--sigma", type=float, help="Noise level of the dataset to fit")
    common.add_argument("--case", type=int, choices=[1, 2, 3], help="Training case")
    common.add_argument("--out", "-o", help="Output directory")
    common.add_argument("--workers", type=int, help="Worker threads (default: LAGRANGIA_WORKERS or 1)")
    common.add_argument("--quiet", "-q", action="store_true", help="Only print errors")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate", parents=[common], help="Simulate training datasets")
    fit_cmd = commands.add_parser("fit", parents=[common], help="Learn the sparse Lagrangian")
    fit_cmd.add_argument("--dataset", help="Dataset CSV (default: <out>/data/train_sigma_<sigma>.csv)")
    for name, text in (("validate", "Roll out the learned model"), ("report", "Write report files")):
        cmd = commands.add_parser(name, parents=[common], help=text)
        cmd.add_argument("--model", help="Model JSON (default: <out>/fit/model.json)")
    sweep_cmd = commands.add_parser("sweep", parents=[common], help="Informational noise sweep")
    sweep_cmd.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 1e-3, 2e-2])
    sweep_cmd.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code"""
    load_dotenv()
    args = build_parser().parse_args(argv)
    if args.quiet:
        console.set_verbose(False)

    try:
        config = load_config(args.config, seed=args.seed, sigma=args.sigma, case=args.case, out=args.out)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError(f"--workers must be >= 1, got {args.workers}")
            config.workers = args.workers
        app = LagrangiaApp(config)

        if args.command == "generate":
            return app.generate()
        if args.command == "fit":
            return app.fit(args.dataset)
        if args.command == "validate":
            return app.validate(args.model)
        if args.command == "report":
            return app.report(args.model)
        return app.sweep(args.sigmas, args.seeds)

    except ConfigError as e:
        console.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except NonConvergenceError as e:
        console.error(f"Training did not converge: {e}")
        return EXIT_NOT_CONVERGED
    except (OSError, DatasetParseError) as e:
        console.error(f"I/O error: {e}")
        return EXIT_IO
    except LagrangiaError as e:
        console.error(f"{type(e).__name__}: {e}")
        return EXIT_NOT_CONVERGED
    except KeyboardInterrupt:
        console.error("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
