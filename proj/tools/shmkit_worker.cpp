#include "shmkit/cluster.hpp"
#include "shmkit/kernels.hpp"

int main(int argc, char** argv) { return shmkit::worker_main(argc, argv, shmkit::builtin_kernels()); }
