"""
Shared plumbing for the app's management commands: usage errors exit with
code 1, and app exceptions become ``CommandError`` carrying their exit code.
"""

import logging
import sys

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError, CommandParser

from ..constants import EXIT_USAGE
from ..exceptions import AlignmentError

logger = logging.getLogger(__name__)


class UsageErrorParser(CommandParser):
    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)


class AlignmentCommand(BaseCommand):
    """
    Subclasses implement ``run(*args, **options)`` instead of ``handle``.
    """

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        # BaseCommand always builds a plain CommandParser; UsageErrorParser adds no state
        parser.__class__ = UsageErrorParser
        return parser

    def handle(self, *args, **options):
        try:
            return self.run(*args, **options)
        except AlignmentError as exc:
            logger.error("%s failed: %s", self.__class__.__module__.rsplit(".", 1)[-1], exc)
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def run(self, *args, **options):
        raise NotImplementedError("subclasses of AlignmentCommand must provide a run() method")

    def should_record(self, options) -> bool:
        return settings.SSTA_RECORD_RUNS and not options.get("no_record")

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))
