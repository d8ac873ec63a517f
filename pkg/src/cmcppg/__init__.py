"""Alarm-based weak labeling and cluster-membership-consistency training for
PPG atrial-fibrillation detection, at desk scale."""

__version__ = "0.1.0"
