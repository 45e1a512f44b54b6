"""Exception hierarchy.

Every error raised on purpose by the package derives from ``GrantcheckError``
so callers (the CLI in particular) can tell data problems apart from bugs.
"""


class GrantcheckError(Exception):
    """Base class for all package errors."""


class SnapshotError(GrantcheckError):
    """A permission snapshot, taxonomy or mapping file could not be read."""


class ContradictorySnapshotError(SnapshotError):
    pass


class UnknownPermissionError(GrantcheckError, KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"unknown permission: {self.name}"


class UnknownCategoryError(GrantcheckError, ValueError):
    def __init__(self, names):
        self.names = sorted(names)
        super().__init__("unknown data safety categories: " + ", ".join(self.names))


class DeclarationUnavailable(GrantcheckError):
    """No declared-behavior source exists for a package."""

    def __init__(self, package_name):
        super().__init__(f"declared behavior unavailable for {package_name}")
        self.package_name = package_name


class IndexBuildError(GrantcheckError):
    def __init__(self, message, entries=()):
        super().__init__(message)
        self.entries = list(entries)


class AnalystError(GrantcheckError):
    pass


class EndpointError(AnalystError):
    """The text-generation endpoint could not be reached or timed out."""


class ResponseValidationError(AnalystError):
    def __init__(self, message, raw_response):
        super().__init__(message)
        self.raw_response = raw_response


class BrokerClosed(GrantcheckError):
    pass


class PayloadTooLarge(GrantcheckError, ValueError):
    pass


class EmptyCorpusError(GrantcheckError):
    def __init__(self):
        super().__init__("no apps to analyze")


class UnknownEntryError(GrantcheckError, KeyError):
    def __init__(self, entry_id):
        super().__init__(entry_id)
        self.entry_id = entry_id

    def __str__(self):
        return f"unknown index entry: {self.entry_id}"
