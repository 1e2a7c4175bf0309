class ExportError(Exception):
    """Any failure the exporter can attribute to its inputs or model."""
