"""Dataset ingestion, experiment runs, reports and the command line."""
