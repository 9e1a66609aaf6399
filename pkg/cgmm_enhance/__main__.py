"""支持 python -m cgmm_enhance 启动命令行（与 cli.main 一致）。"""

from .cli import main

if __name__ == "__main__":
    main()
