#include <critscen/cli.hpp>

int main(int argc, char** argv) { return critscen::run_cli(argc, argv); }
