from guieval.cli import main

raise SystemExit(main())
