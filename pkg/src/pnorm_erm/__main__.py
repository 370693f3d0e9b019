from pnorm_erm.cli import main

main()
