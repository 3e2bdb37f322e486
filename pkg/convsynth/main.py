"""This is the main file of convsynth and simply runs the command-line interface, which sets up
   the logger before dispatching to a command.
"""
import convsynth.cli as cli

if __name__ == "__main__":
    cli.cli()  # pylint: disable=no-value-for-parameter
