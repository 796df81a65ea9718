from fedxray.cli import cli

cli(prog_name="fedxray")
