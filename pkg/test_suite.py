#!/usr/bin/env python3
"""
Test Suite di accettazione per la Multi-Decoder U-Net
Overfit sul set sintetico, confronto con la baseline a decoder singolo,
determinismo end-to-end
"""

import argparse
import json
import logging
import statistics
import tempfile
import time
from dataclasses import dataclass, asdict
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.backbone_net import ModelConfig, build_model, parameter_count, independent_parameter_count
from src.datapipe import prepare_cases, save_dataset, split_train_validation, synth_generate
from src.losses import LossWeights
from src.metrics import evaluate_dataset
from src.trainer import (
    TrainSchedule,
    case_ground_truth,
    predict,
    train,
    train_single_level_baseline,
)

# Configurazione logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


@dataclass
class TestResult:
    """Risultato di un test"""
    test_name: str
    success: bool
    duration: float
    details: Dict[str, Any]
    error: Optional[str] = None


def _mean_score(model, cases) -> float:
    preds = [predict(model, c.image, c.crop) for c in cases]
    gts = [case_ground_truth(c) for c in cases]
    return evaluate_dataset(preds, gts).mean


class AcceptanceTester:
    """
    Esegue i controlli di accettazione su dati sintetici
    """

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        self.config = {
            'overfit_epochs': 200,
            'overfit_threshold': 0.90,
            'trend_cases': 40,
            'trend_epochs': 100,
            'trend_seeds': [0, 1, 2],
            'determinism_epochs': 3,
        }
        self.config.update(config or {})
        self.model_config = ModelConfig()
        self.test_results: List[TestResult] = []

    def _run(self, name: str, fn) -> TestResult:
        logger.info(f"Running {name}...")
        start = time.time()
        try:
            success, details = fn()
            result = TestResult(name, success, time.time() - start, details)
        except Exception as e:
            logger.error(f"{name} failed with error: {e}")
            result = TestResult(name, False, time.time() - start, {}, str(e))
        self.test_results.append(result)
        logger.info(f"{name}: {'PASS' if result.success else 'FAIL'} ({result.duration:.1f}s)")
        return result

    def run_all_tests(self) -> Dict[str, Any]:
        start = time.time()
        self._run('architecture', self._test_architecture)
        self._run('overfit', self._test_overfit)
        self._run('trend_vs_single_decoder', self._test_trend)
        self._run('determinism', self._test_determinism)
        return self._generate_report(time.time() - start)

    def _test_architecture(self):
        multi = parameter_count(build_model(self.model_config, seed=0))
        independent = independent_parameter_count(self.model_config)
        return multi < independent, {'multi_decoder': multi, 'independent_nets': independent}

    def _test_overfit(self):
        cases = prepare_cases(synth_generate(8, 3, seed=7, ambiguity=0.3),
                              self.model_config.grid_multiple)
        schedule = TrainSchedule(total_epochs=self.config['overfit_epochs'], seed=0)
        model = build_model(self.model_config, seed=0)
        train(model, cases, schedule, LossWeights.uniform(3), cases)
        score = _mean_score(model, cases)
        return score >= self.config['overfit_threshold'], {'train_staple_score': score}

    def _test_trend(self):
        cases = prepare_cases(synth_generate(self.config['trend_cases'], 3, seed=7, ambiguity=0.3),
                              self.model_config.grid_multiple)
        train_cases, val_cases = split_train_validation(cases, 0.2)
        multi_scores, single_scores = [], []
        for seed in self.config['trend_seeds']:
            schedule = TrainSchedule(total_epochs=self.config['trend_epochs'], seed=seed)
            model = build_model(self.model_config, seed=seed)
            train(model, train_cases, schedule, LossWeights.uniform(3), val_cases)
            multi_scores.append(_mean_score(model, val_cases))

            baseline, _ = train_single_level_baseline(self.model_config, train_cases, schedule,
                                                      val_cases=val_cases)
            single_scores.append(_mean_score(baseline, val_cases))

        multi, single = statistics.mean(multi_scores), statistics.mean(single_scores)
        return multi > single, {
            'multi_decoder': multi_scores,
            'single_decoder': single_scores,
            'multi_mean': multi,
            'single_mean': single,
        }

    def _test_determinism(self):
        config = ModelConfig(stage_channels=[8, 16, 16], n_decoders=3)
        cases = prepare_cases(synth_generate(4, 3, seed=7, ambiguity=0.3, shape=(32, 32)),
                              config.grid_multiple)
        schedule = TrainSchedule(total_epochs=self.config['determinism_epochs'],
                                 cross_enable_epoch=1, warmup_epochs=1, seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            for name in ('a', 'b'):
                save_dataset(synth_generate(4, 3, seed=7, ambiguity=0.3, shape=(32, 32)),
                             root / name / 'data')
                train(build_model(config, seed=0), cases[:3], schedule,
                      LossWeights.uniform(3), cases[3:], root / name / 'run')

            same_losses = (root / 'a/run/loss_components.csv').read_bytes() == \
                (root / 'b/run/loss_components.csv').read_bytes()
            same_data = all(
                p.read_bytes() == (root / 'b/data' / p.relative_to(root / 'a/data')).read_bytes()
                for p in (root / 'a/data').rglob('*') if p.is_file()
            )
        return same_losses and same_data, {'loss_csv_identical': same_losses,
                                           'dataset_identical': same_data}

    def _generate_report(self, total_duration: float) -> Dict[str, Any]:
        successful = [r for r in self.test_results if r.success]
        return {
            'summary': {
                'total_tests': len(self.test_results),
                'successful_tests': len(successful),
                'success_rate': len(successful) / len(self.test_results),
                'total_duration': total_duration,
            },
            'config': self.config,
            'results': [asdict(r) for r in self.test_results],
            'timestamp': datetime.now().isoformat(),
        }

    def save_report(self, report: Dict[str, Any], filename: Optional[str] = None) -> str:
        """Salva report su file"""
        if not filename:
            timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
            filename = f'acceptance_report_{timestamp}.json'

        with open(filename, 'w') as f:
            json.dump(report, f, indent=2)

        logger.info(f"Acceptance report saved to: {filename}")
        return filename


def main():
    """Funzione principale per eseguire i test di accettazione"""
    parser = argparse.ArgumentParser(description='Acceptance suite')
    parser.add_argument('--overfit-epochs', type=int, default=200)
    parser.add_argument('--trend-epochs', type=int, default=100)
    parser.add_argument('--report', help='Path del report JSON')
    args = parser.parse_args()

    tester = AcceptanceTester({'overfit_epochs': args.overfit_epochs,
                               'trend_epochs': args.trend_epochs})
    report = tester.run_all_tests()
    report_file = tester.save_report(report, args.report)

    print("\nAcceptance Summary:")
    print(f"Total Tests: {report['summary']['total_tests']}")
    print(f"Successful: {report['summary']['successful_tests']}")
    print(f"Success Rate: {report['summary']['success_rate']:.1%}")
    print(f"Total Duration: {report['summary']['total_duration']:.2f}s")
    for result in report['results']:
        print(f"  {result['test_name']}: {'PASS' if result['success'] else 'FAIL'} {result['details']}")
    print(f"\nFull report saved to: {report_file}")
    return report


if __name__ == "__main__":
    main()
