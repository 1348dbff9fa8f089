import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np


@dataclass
class Alert:
    """Data class for training alerts"""
    alert_type: str
    message: str
    severity: str  # 'low', 'medium', 'high', 'critical'
    batch_index: int
    resolved: bool = False


class TrainingMonitor:
    """Raises alerts for constraint violations, slack growth and unstable losses"""

    def __init__(self, cooldown_batches: int = 50, violation_tolerance: float = 0.0,
                 divergence_threshold: float = 1e12):
        self.cooldown_batches = cooldown_batches
        self.violation_tolerance = violation_tolerance
        self.divergence_threshold = divergence_threshold
        self.logger = logging.getLogger(__name__)

        # Batch index of the last alert per type, for cooldown
        self.last_alert_batches: Dict[str, int] = {}
        self.active_alerts: List[Alert] = []
        self.batches_seen = 0
        self._previous_slack: Optional[np.ndarray] = None

    def should_raise_alert(self, alert_type: str, batch_index: int) -> bool:
        """Check if enough batches have passed since the last alert of this type"""
        last = self.last_alert_batches.get(alert_type)
        if last is None:
            return True
        return batch_index - last >= self.cooldown_batches

    def create_alert(self, alert_type: str, message: str, severity: str = 'medium',
                     batch_index: int = 0) -> Alert:
        """Create a new alert"""
        alert = Alert(alert_type=alert_type, message=message, severity=severity, batch_index=batch_index)
        self.active_alerts.append(alert)
        self.last_alert_batches[alert_type] = batch_index

        level = logging.ERROR if severity == 'critical' else logging.WARNING
        self.logger.log(level, f"Alert: [{severity.upper()}] {alert_type}: {message}")
        return alert

    def _maybe_alert(self, alert_type: str, message: str, severity: str, batch_index: int) -> Optional[Alert]:
        if severity != 'critical' and not self.should_raise_alert(alert_type, batch_index):
            return None
        return self.create_alert(alert_type, message, severity, batch_index)

    def process_batch(self, losses: Sequence[float], slacks: Sequence[float],
                      slack_u: Optional[Sequence[float]] = None,
                      constraints_active: bool = True) -> List[Alert]:
        """Inspect one batch's layer losses, constraint values g and slacks u"""
        batch_index = self.batches_seen
        self.batches_seen += 1
        alerts: List[Alert] = []

        final = losses[-1] if len(losses) else 0.0
        if not np.all(np.isfinite(losses)) or abs(final) > self.divergence_threshold:
            alert = self._maybe_alert(
                "Divergent Loss",
                f"final-layer loss is {final!r} (threshold {self.divergence_threshold:g})",
                'critical', batch_index,
            )
            alerts.append(alert)
            return alerts

        if constraints_active:
            scale = max(abs(losses[0]), 1e-12)
            for layer, g in enumerate(slacks, start=1):
                if g <= self.violation_tolerance:
                    continue
                relative = g / scale
                severity = 'high' if relative > 0.1 else 'medium' if relative > 0.01 else 'low'
                alert = self._maybe_alert(
                    f"Constraint Violation (layer {layer})",
                    f"g_{layer} = {g:.4g} ({relative:.2%} of the reference loss)",
                    severity, batch_index,
                )
                if alert is not None:
                    alerts.append(alert)

        if slack_u is not None and len(slack_u):
            current = np.asarray(slack_u, dtype=np.float64)
            if self._previous_slack is not None and np.max(current) > 2.0 * max(np.max(self._previous_slack), 1e-8):
                alert = self._maybe_alert(
                    "Slack Growth",
                    f"largest resilience slack grew to {np.max(current):.4g}",
                    'low', batch_index,
                )
                if alert is not None:
                    alerts.append(alert)
            self._previous_slack = current

        return alerts

    def resolve(self, alert_type: str):
        for alert in self.active_alerts:
            if alert.alert_type == alert_type:
                alert.resolved = True

    def get_alert_summary(self) -> Dict:
        """Get summary of unresolved alerts"""
        summary = {
            'total_alerts': 0,
            'by_severity': {},
            'by_type': {},
            'batches_seen': self.batches_seen,
        }
        for alert in self.active_alerts:
            if alert.resolved:
                continue
            summary['total_alerts'] += 1
            summary['by_severity'][alert.severity] = summary['by_severity'].get(alert.severity, 0) + 1
            summary['by_type'][alert.alert_type] = summary['by_type'].get(alert.alert_type, 0) + 1
        return summary
