from .cluster_cli import ClusterRobustCLI
from command import CommandProcessor

__all__ = ["ClusterRobustCLI", "CommandProcessor"]
