# Command-line subcommands
