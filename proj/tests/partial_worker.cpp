// A worker whose kernel table lacks one built-in.

#include "shmkit/cluster.hpp"
#include "shmkit/kernels.hpp"

int main(int argc, char** argv)
{
    shmkit::KernelTable table = shmkit::builtin_kernels();
    table.erase("mi_pde");
    return shmkit::worker_main(argc, argv, table);
}
