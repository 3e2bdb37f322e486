import pathlib
import pylint.lint
package = pathlib.Path(__file__).parent
pylint_opts = [str(package / name) for name in
               ['core.py', 'operators.py', 'solvers.py', 'highpass.py', 'dictionary.py',
                'lambda_maps.py', 'training.py', 'simulate.py', 'metrics.py', 'cli.py',
                'config_handler.py', 'array_handler.py', 'custom_logger.py', 'main.py']
               ]
pylint.lint.Run(pylint_opts)
