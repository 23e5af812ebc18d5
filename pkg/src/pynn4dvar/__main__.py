from pynn4dvar.cli import main

main()
