"""
Command line for the correction planner pipeline.

Usage:
    python cli.py suite gen
    python cli.py vocab build
    python cli.py train il | train rl | train critic
    python cli.py eval --label il
    python cli.py ablate --policy il=runs/policy_il.ckpt
    python cli.py render runs/records/policy/<tag>/idm/lead_brake_000.json --out lead_brake.svg
    python cli.py render runs/records/policy/<tag>/idm --out renders/
    python cli.py check-grads

Every command accepts ``--config settings.json``, ``--set section.key=value`` (repeatable) and ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from evaluation import Checkpoints, ablate, evaluate, generate_suite, render, render_many
from evaluation.harness import load_records
from logger import StatusLogger, configure_console
from models import PlannerError, Scenario
from networks import CollisionCritic, EgoPolicy, WorldModel
from scenario_store import load_scenario, load_suite
from settings_manager import PipelineSettings, SettingsError, SettingsManager, apply_overrides
from simulation.record import RolloutRecord
from tokenizer import TokenVocabulary, collect_segments, fit_vocabulary
from training.critic_training import collect_critic_rollouts, sweep_critic_horizon, train_critic
from training.gradient_checks import run_gradient_checks
from training.imitation import pretrain
from training.reinforce import ReinforceTrainer, select_hard_examples

SEEDED_SECTIONS = ("suite", "model", "pretrain", "rl", "critic", "evaluation")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="settings JSON (must exist and parse)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a settings key, e.g. correction.threshold=0.7")
    common.add_argument("--seed", type=int, help="seed for every stage")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="correction-planner", description=__doc__.splitlines()[1])
    sub = parser.add_subparsers(dest="command", required=True)

    suite = sub.add_parser("suite", help="scenario suites").add_subparsers(dest="action", required=True)
    suite.add_parser("gen", parents=[common], help="generate the conflict scenario suite")

    vocab = sub.add_parser("vocab", help="motion vocabulary").add_subparsers(dest="action", required=True)
    vocab.add_parser("build", parents=[common], help="fit the K-disk vocabulary on the suite's trajectories")

    train = sub.add_parser("train", help="training stages").add_subparsers(dest="action", required=True)
    train.add_parser("il", parents=[common], help="joint imitation, correction and world-model pretraining")
    rl = train.add_parser("rl", parents=[common], help="REINFORCE fine-tuning with self-correction")
    rl.add_argument("--all-scenarios", action="store_true", help="skip hard-example selection")
    critic = train.add_parser("critic", parents=[common], help="fit and calibrate the collision critic")
    critic.add_argument("--policy", type=Path, help="policy that drives the data rollouts (default: IL policy)")
    critic.add_argument("--sweep", type=int, nargs="+", metavar="K", help="also run the critic horizon sweep")

    ev = sub.add_parser("eval", parents=[common], help="evaluate one correction configuration")
    ev.add_argument("--policy", type=Path, help="policy checkpoint (default: paths.policy)")
    ev.add_argument("--label", default="policy")

    ab = sub.add_parser("ablate", parents=[common], help="threshold x correction-length grid plus baselines")
    ab.add_argument("--policy", dest="policies", action="append", default=[], metavar="NAME=PATH",
                    help="extra named checkpoint evaluated with and without correction")

    rd = sub.add_parser("render", parents=[common], help="SVG snapshot of a stored rollout or a directory of them")
    rd.add_argument("record", type=Path, help="record file, or a records directory (--out is then a directory)")
    rd.add_argument("--scenario", type=Path, help="scenario file (default: looked up in paths.suite_dir)")
    rd.add_argument("--out", type=Path, required=True)
    rd.add_argument("--every", type=int, default=4)

    sub.add_parser("check-grads", parents=[common], help="finite-difference check of every layer and loss")
    return parser


def load_settings(args: argparse.Namespace) -> PipelineSettings:
    manager = SettingsManager(args.config, explicit=True) if args.config else SettingsManager()
    settings = manager.load()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"{section}.seed={args.seed}" for section in SEEDED_SECTIONS]
    return apply_overrides(settings, overrides)


class Pipeline:
    """Runs one CLI command against the loaded settings."""

    def __init__(self, settings: PipelineSettings, log: StatusLogger) -> None:
        self.settings = settings
        self.log = log
        self.out_dir = Path(settings.paths.out_dir)

    def progress(self, component: str) -> Callable[[str], None]:
        return self.log.child(component).log_progress

    # artifacts

    def vocab(self) -> TokenVocabulary:
        return TokenVocabulary.load(Path(self.settings.paths.vocab))

    def scenarios(self) -> List[Scenario]:
        scenarios = load_suite(Path(self.settings.paths.suite_dir))
        if not scenarios:
            raise PlannerError(f"No scenarios in {self.settings.paths.suite_dir}; run 'suite gen' first")
        return scenarios

    def _optional(self, path: str) -> Optional[Path]:
        return Path(path) if Path(path).exists() else None

    # commands

    def suite_gen(self, args: argparse.Namespace) -> int:
        scenarios = generate_suite(self.settings.suite, Path(self.settings.paths.suite_dir), self.progress("suite"))
        self.log.update_status(f"Wrote {len(scenarios)} scenarios to {self.settings.paths.suite_dir}")
        return 0

    def vocab_build(self, args: argparse.Namespace) -> int:
        cfg = self.settings.vocab
        scenarios = self.scenarios()
        trajectories = [traj for s in scenarios for traj in (s.expert, *s.agent_logs)]
        segments = collect_segments(trajectories, self.settings.sim.substeps_per_token)
        vocab = fit_vocabulary(segments, cfg.target, cfg.tolerance, max_iters=cfg.max_iters,
                               on_log=self.progress("vocab"))
        vocab.save(Path(self.settings.paths.vocab))
        self.log.update_status(f"Vocabulary of {len(vocab)} tokens (radius {vocab.radius:.4f}) from "
                               f"{len(segments)} segments")
        return 0

    def train_il(self, args: argparse.Namespace) -> int:
        s = self.settings
        vocab = self.vocab()
        policy = EgoPolicy(vocab, s.model.net, s.model.features, seed=s.model.seed)
        world_model = WorldModel(vocab, s.model.net, s.model.features, seed=s.model.seed + 1)
        result = pretrain(policy, world_model, self.scenarios(), s.pretrain, self.out_dir / "il_loss.csv",
                          self.progress("pretrain"))
        policy.save(Path(s.paths.il_policy))
        world_model.save(Path(s.paths.world_model))
        self.log.update_status(f"Pretraining done, final loss {result.final_loss:.4f}")
        return 0

    def train_rl(self, args: argparse.Namespace) -> int:
        s = self.settings
        vocab = self.vocab()
        policy = EgoPolicy.load(Path(s.paths.il_policy), vocab)
        world_model = WorldModel.load(Path(s.paths.world_model), vocab)
        critic_path = self._optional(s.paths.critic)
        critic = CollisionCritic.load(critic_path, vocab) if critic_path else None
        if critic is None and s.rl.self_correction:
            raise PlannerError("RL with self-correction needs a trained critic; run 'train critic' first",
                               {"path": s.paths.critic})
        scenarios = self.scenarios()
        if not args.all_scenarios:
            scenarios = select_hard_examples(policy, world_model, scenarios, seed=s.rl.seed)
            self.log.log_info(f"Hard-example selection kept {len(scenarios)} scenarios")
        trainer = ReinforceTrainer(policy, world_model, critic, scenarios, s.rl)
        trainer.on_log(self.progress("reinforce"))
        trainer.run(self.out_dir / "rl_loss.csv")
        policy.save(Path(s.paths.policy))
        self.log.update_status(f"RL policy written to {s.paths.policy}")
        return 0

    def train_critic(self, args: argparse.Namespace) -> int:
        s = self.settings
        vocab = self.vocab()
        policy = EgoPolicy.load(args.policy or Path(s.paths.il_policy), vocab)
        world_model = WorldModel.load(Path(s.paths.world_model), vocab)
        rollouts = collect_critic_rollouts(policy, world_model, self.scenarios(), s.critic)
        self.log.log_info(f"Collected {len(rollouts)} critic rollouts")

        def new_critic() -> CollisionCritic:
            return CollisionCritic(vocab, s.model.net, s.model.features, seed=s.model.seed + 2)

        critic = new_critic()
        result = train_critic(rollouts, critic, s.critic, self.out_dir, self.progress("critic"))
        critic.save(Path(s.paths.critic))
        if args.sweep:
            sweep_critic_horizon(rollouts, args.sweep, s.critic, new_critic, self.out_dir / "critic_horizon.csv")
        self.log.update_status(f"Critic written to {s.paths.critic}, validation accuracy {result.val_accuracy:.3f}")
        return 0

    def checkpoints(self, policy_path: Optional[Path] = None) -> Checkpoints:
        p = self.settings.paths
        return Checkpoints.load(
            Path(p.vocab),
            policy_path or Path(p.policy),
            self._optional(p.world_model),
            self._optional(p.critic),
        )

    def records_dir(self) -> Optional[Path]:
        return self.out_dir / "records" if self.settings.evaluation.store_records else None

    def eval(self, args: argparse.Namespace) -> int:
        s = self.settings
        report = evaluate(
            self.scenarios(), self.checkpoints(args.policy), s.correction, s.evaluation.agent_mode,
            s.evaluation.seed, s.sim, s.evaluation.workers, self.records_dir(), self.progress("eval"), args.label,
        )
        out_csv = self.out_dir / f"eval_{args.label}.csv"
        report.to_csv(out_csv)
        self.log.update_status(f"Wrote {len(report.rows)} rows to {out_csv}")
        return 0

    def ablate(self, args: argparse.Namespace) -> int:
        s = self.settings
        checkpoints = self.checkpoints()
        policies: Dict[str, EgoPolicy] = {}
        for item in args.policies:
            name, sep, path = item.partition("=")
            if not sep or not name:
                raise SettingsError(f"--policy must look like NAME=PATH, got {item!r}")
            policies[name] = EgoPolicy.load(Path(path), checkpoints.vocab)
        out_csv = self.out_dir / "ablation.csv"
        report = ablate(
            self.scenarios(), checkpoints, s.evaluation.thresholds, s.evaluation.lengths, s.correction,
            s.evaluation.agent_mode, s.evaluation.seed, s.sim, s.evaluation.workers, policies, out_csv,
            self.records_dir(), self.progress("ablate"),
        )
        self.log.update_status(f"Wrote {len(report.rows)} rows to {out_csv}")
        return 0

    def render(self, args: argparse.Namespace) -> int:
        suite_dir = Path(self.settings.paths.suite_dir)
        if args.record.is_dir():
            records = load_records(args.record)
            if not records:
                raise PlannerError(f"No rollout records in {args.record}", {"path": str(args.record)})
            pairs = [(record, load_scenario(suite_dir / f"{record.scenario_name}.json")) for record in records]
            outs = render_many(pairs, args.out, args.every)
            self.log.update_status(f"Rendered {len(outs)} rollouts into {args.out}")
            return 0
        record = RolloutRecord.load(args.record)
        scenario_path = args.scenario or suite_dir / f"{record.scenario_name}.json"
        out = render(record, load_scenario(scenario_path), args.out, args.every)
        self.log.update_status(f"Rendered {out}")
        return 0

    def check_grads(self, args: argparse.Namespace) -> int:
        summary = run_gradient_checks(self.settings.model.seed)
        print(json.dumps(summary, indent=2, sort_keys=True))
        if not summary["passed"]:
            self.log.log_error("Gradient check failed")
            return 1
        self.log.update_status("All gradient checks within tolerance")
        return 0


COMMANDS = {
    ("suite", "gen"): Pipeline.suite_gen,
    ("vocab", "build"): Pipeline.vocab_build,
    ("train", "il"): Pipeline.train_il,
    ("train", "rl"): Pipeline.train_rl,
    ("train", "critic"): Pipeline.train_critic,
    ("eval", None): Pipeline.eval,
    ("ablate", None): Pipeline.ablate,
    ("render", None): Pipeline.render,
    ("check-grads", None): Pipeline.check_grads,
}


def error_payload(exc: Exception) -> Dict[str, object]:
    return {
        "error": type(exc).__name__,
        "message": str(exc),
        "details": getattr(exc, "details", {}),
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_console(args.verbose)
    log = StatusLogger("cli")
    pipeline: Optional[Pipeline] = None
    try:
        pipeline = Pipeline(load_settings(args), log)
        command = COMMANDS[(args.command, getattr(args, "action", None))]
        return command(pipeline, args)
    except (PlannerError, ValueError) as exc:
        log.log_error(str(exc))
        print(json.dumps(error_payload(exc), default=str), file=sys.stderr)
        return 1
    finally:
        if pipeline is not None:
            pipeline.log.export_logs_to_file(pipeline.out_dir / "run.log")


if __name__ == "__main__":
    raise SystemExit(main())
