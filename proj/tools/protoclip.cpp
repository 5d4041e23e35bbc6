#include "protoclip/cli.hpp"

int main(int argc, char** argv) { return protoclip::cli::run(argc, argv); }
