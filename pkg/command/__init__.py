from .fit_commands import (
    cmd_fit,
    cmd_diagnose,
    prepare_fit,
)
from .simulation_commands import cmd_simulate
from .oracle_commands import cmd_oracle_check
from .general_commands import (
    get_command_list,
    HELP_TEXT,
)
from .command_processor import CommandProcessor
