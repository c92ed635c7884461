def transform(grid):
    n = len(grid)
    m = len(grid[0])
    output_size = n * m
    output = [[0] * output_size for _ in range(output_size)]
    for i in range(n):
        for j in range(m):
            value = grid[i][j]
            for ii in range(i * m, (i + 1) * m):
                for jj in range(j * n, (j + 1) * n):
                    output[ii][jj] = value
    return output