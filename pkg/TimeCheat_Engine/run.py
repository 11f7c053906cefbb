from app import create_cli

cli = create_cli()

if __name__ == "__main__":
    # python run.py train --config run.json
    cli(prog_name="timecheat")
