#!/usr/bin/env python3
"""
Quick test script for Unrolled Transformer Training
"""

import sys
import tempfile
from datetime import datetime

import numpy as np


def test_imports():
    """Test if all modules can be imported"""
    print("🧪 Testing imports...")

    try:
        from src.config import Config
        from src.trainer import train, erm_train
        from src.models import init_model, model_forward
        from src.data_logger import DataLogger
        print("✅ All imports successful")
        return True
    except Exception as e:
        print(f"❌ Import failed: {e}")
        return False


def test_configuration():
    """Test environment settings and an experiment config"""
    print("🧪 Testing configuration...")

    try:
        from src.config import Config
        from src.experiment_config import ExperimentConfig

        print(f"   Output directory: {Config.OUTPUT_DIR}")
        print(f"   Gradcheck: {Config.GRADCHECK_TRIALS} trials, tolerance {Config.GRADCHECK_TOLERANCE:g}")

        logger = Config.setup_logging()
        logger.info("Test log message")
        Config.validate_config()

        config = ExperimentConfig.from_file("configs/denoising_ut.ini")
        print(f"   Example config hash: {config.config_hash()[:12]}")

        print("✅ Configuration test passed")
        return True
    except Exception as e:
        print(f"❌ Configuration test failed: {e}")
        return False


def test_gradients():
    """Spot-check autodiff against finite differences"""
    print("🧪 Testing gradients...")

    try:
        from src.gradcheck import run_suite

        reports = run_suite(trials=3, names=["matmul", "softmax_rows", "ut_layer_forward", "dust_layer_forward"])
        for report in reports:
            print(f"   {report.name}: {'✅' if report.passed else '❌'} ({report.worst_error:.2e})")

        if not all(report.passed for report in reports):
            raise RuntimeError("gradient mismatch")
        print("✅ Gradient test passed")
        return True
    except Exception as e:
        print(f"❌ Gradient test failed: {e}")
        return False


def test_training():
    """Train a tiny constrained model for one epoch"""
    print("🧪 Testing training...")

    try:
        from src.data_tasks import prepare_task
        from src.evaluation import layerwise_eval
        from src.models import init_model
        from src.trainer import ConstraintSchedule, DualState, TrainConfig, train

        task = prepare_task("denoising", 4, 3, 32, 16, 0.2, seed=0)
        params = init_model("ut", 4, 4, 3, seed=0)
        result = train(params, task.train, ConstraintSchedule.constant(0.2, 3),
                       DualState.zeros(3, resilient_mode="weight_decay"),
                       TrainConfig(epochs=1, batch_size=8, eta1=1e-3))

        print(f"   Batches: {len(result.log)}")
        print(f"   Multipliers: {np.round(result.dual.lam, 4).tolist()}")
        print(f"   Held-out layer losses: {np.round(layerwise_eval(result.params, task.heldout), 4).tolist()}")

        print("✅ Training test passed")
        return True
    except Exception as e:
        print(f"❌ Training test failed: {e}")
        return False


def test_data_logging():
    """Test checkpoint and CSV output"""
    print("🧪 Testing data logging...")

    try:
        from src.checkpoint import load_checkpoint, save_checkpoint
        from src.data_logger import DataLogger, training_log_columns
        from src.models import init_model

        with tempfile.TemporaryDirectory() as directory:
            data_logger = DataLogger(directory)

            params = init_model("dust", 4, 8, 2, seed=0)
            path = save_checkpoint(data_logger.checkpoint_path("constrained"), params, {"seed": 0})
            loaded, meta = load_checkpoint(path)
            print(f"   Checkpoint round trip: {'✅' if loaded.parameter_count() == params.parameter_count() else '❌'}")

            record = {column: 0 for column in training_log_columns(2)}
            success = data_logger.log_training("constrained", [record], num_layers=2)
            print(f"   Training log: {'✅' if success else '❌'}")

        print("✅ Data logging test passed")
        return True
    except Exception as e:
        print(f"❌ Data logging test failed: {e}")
        return False


def test_training_monitor():
    """Test training alerts"""
    print("🧪 Testing training monitor...")

    try:
        from src.training_monitor import TrainingMonitor

        monitor = TrainingMonitor(cooldown_batches=10)
        alerts = monitor.process_batch([1.0, 0.9, 0.95], [0.1, 0.3])
        print(f"   Alerts raised: {len(alerts)}")
        for alert in alerts:
            print(f"   {alert.alert_type}: {alert.severity}")

        summary = monitor.get_alert_summary()
        print(f"   Alert summary: {summary['total_alerts']} total alerts")

        print("✅ Training monitor test passed")
        return True
    except Exception as e:
        print(f"❌ Training monitor test failed: {e}")
        return False


def main():
    """Run all tests"""
    print("🚀 Unrolled Transformer Training - Quick Test Suite")
    print("=" * 60)
    print(f"📅 Test started at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 60)

    tests = [
        ("Module Imports", test_imports),
        ("Configuration", test_configuration),
        ("Gradients", test_gradients),
        ("Training", test_training),
        ("Data Logging", test_data_logging),
        ("Training Monitor", test_training_monitor),
    ]

    passed = 0
    total = len(tests)

    for test_name, test_func in tests:
        print(f"\n📋 Running: {test_name}")
        print("-" * 40)

        if test_func():
            passed += 1
        else:
            print(f"⚠️ Test '{test_name}' failed")

    print("\n" + "=" * 60)
    print(f"📊 Test Results: {passed}/{total} tests passed")

    if passed == total:
        print("🎉 All tests passed! The system is ready to use.")
        print("\n📝 Next steps:")
        print("1. Run 'python main.py gradcheck' for the full gradient suite")
        print("2. Run 'python main.py train --config configs/denoising_ut.ini'")
    else:
        print("❌ Some tests failed. Please check the errors above.")
        print("💡 Make sure all dependencies are installed:")
        print("   pip install -r requirements.txt")

    print("=" * 60)

    return passed == total


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
