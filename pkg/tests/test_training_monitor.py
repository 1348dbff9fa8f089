import math

import pytest

from src.training_monitor import TrainingMonitor


@pytest.fixture
def monitor():
    return TrainingMonitor(cooldown_batches=5)


class TestViolations:
    @pytest.mark.parametrize("g, severity", [(0.2, "high"), (0.05, "medium"), (0.005, "low")])
    def test_severity_scales_with_reference_loss(self, monitor, g, severity):
        alerts = monitor.process_batch([1.0, 0.9], [g])
        assert len(alerts) == 1
        assert alerts[0].severity == severity
        assert alerts[0].alert_type == "Constraint Violation (layer 1)"

    def test_satisfied_constraints_are_quiet(self, monitor):
        assert monitor.process_batch([1.0, 0.5, 0.2], [-0.3, 0.0]) == []

    def test_tolerance(self):
        monitor = TrainingMonitor(violation_tolerance=0.01)
        assert monitor.process_batch([1.0, 0.9], [0.005]) == []

    def test_inactive_constraints(self, monitor):
        assert monitor.process_batch([1.0, 2.0], [1.5], constraints_active=False) == []

    def test_cooldown_per_type(self, monitor):
        assert len(monitor.process_batch([1.0, 0.9, 0.9], [0.2, 0.2])) == 2
        for _ in range(4):
            assert monitor.process_batch([1.0, 0.9, 0.9], [0.2, 0.2]) == []
        assert len(monitor.process_batch([1.0, 0.9, 0.9], [0.2, 0.2])) == 2
        assert monitor.batches_seen == 6


class TestDivergence:
    def test_non_finite_loss_is_critical(self, monitor):
        alerts = monitor.process_batch([1.0, math.nan], [0.1])
        assert [a.severity for a in alerts] == ["critical"]
        assert alerts[0].alert_type == "Divergent Loss"

    def test_threshold(self):
        monitor = TrainingMonitor(divergence_threshold=10.0)
        assert monitor.process_batch([1.0, 11.0], [0.0])[0].alert_type == "Divergent Loss"

    def test_critical_ignores_cooldown(self, monitor):
        monitor.process_batch([1.0, math.inf], [0.0])
        assert len(monitor.process_batch([1.0, math.inf], [0.0])) == 1


class TestSlackGrowth:
    def test_doubling_slack_alerts(self, monitor):
        assert monitor.process_batch([1.0, 0.5], [-0.1], slack_u=[0.1]) == []
        alerts = monitor.process_batch([1.0, 0.5], [-0.1], slack_u=[0.3])
        assert [a.alert_type for a in alerts] == ["Slack Growth"]

    def test_steady_slack(self, monitor):
        monitor.process_batch([1.0, 0.5], [-0.1], slack_u=[0.1])
        assert monitor.process_batch([1.0, 0.5], [-0.1], slack_u=[0.15]) == []


class TestSummary:
    def test_counts_and_resolve(self, monitor):
        monitor.process_batch([1.0, 0.9, 0.95], [0.2, 0.05])
        summary = monitor.get_alert_summary()
        assert summary["total_alerts"] == 2
        assert summary["by_severity"] == {"high": 1, "medium": 1}
        assert summary["batches_seen"] == 1

        monitor.resolve("Constraint Violation (layer 1)")
        summary = monitor.get_alert_summary()
        assert summary["total_alerts"] == 1
        assert summary["by_type"] == {"Constraint Violation (layer 2)": 1}
